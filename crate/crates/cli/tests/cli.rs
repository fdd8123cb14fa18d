use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankswap")).args(args).current_dir(dir).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_with_defaults() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--out", "run", "--seeds", "5"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "report.json", "snapshots.csv", "occupations.csv", "empirical_tails.csv"] {
        assert!(d.path().join("run").join(f).exists(), "{f} missing");
    }
    let m = json(&d.path().join("run/manifest.json"));
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["seeds"], 5);
    assert_eq!(m["config"]["epsilon"], 0.05);
    assert!(m["versions"]["rankswap"].is_string());
    assert!(m["wall_time_s"].is_number());
}

#[test]
fn same_seed_gives_identical_csvs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.json", r#"{"seed": 17, "epsilon": 0.1}"#);
    for out in ["a", "b"] {
        assert_eq!(run(&["simulate", "--config", &cfg, "--out", out, "--seeds", "8", "--threads", "2"], d.path()).status.code(), Some(0));
    }
    for f in ["snapshots.csv", "occupations.csv", "empirical_tails.csv", "report.json"] {
        let a = std::fs::read(d.path().join("a").join(f)).unwrap();
        let b = std::fs::read(d.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let other = write(d.path(), "o.json", r#"{"seed": 18, "epsilon": 0.1}"#);
    run(&["simulate", "--config", &other, "--out", "c", "--seeds", "8"], d.path());
    assert_ne!(std::fs::read(d.path().join("a/snapshots.csv")).unwrap(), std::fs::read(d.path().join("c/snapshots.csv")).unwrap());
}

#[test]
fn missing_profile_file_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.json", r#"{"profile": {"kind": "file", "path": "nowhere.csv"}}"#);
    let o = run(&["simulate", "--config", &cfg, "--out", "run"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.csv"));
}

#[test]
fn profile_file_is_read() {
    let d = tempfile::tempdir().unwrap();
    let mut csv = String::from("r,u,v\n");
    for i in 0..=100 {
        let r = -2.0 + 0.05 * i as f64;
        let u = (1.0 - (r + 0.5).abs()).max(0.0);
        let v = (1.0 - (r - 0.5).abs()).max(0.0);
        csv.push_str(&format!("{r},{u},{v}\n"));
    }
    write(d.path(), "p.csv", &csv);
    let cfg = write(d.path(), "c.json", r#"{"profile": {"kind": "file", "path": "p.csv"}, "epsilon": 0.1}"#);
    let o = run(&["simulate", "--config", &cfg, "--out", "run", "--seeds", "3"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&d.path().join("run/report.json"))["particles"], 20);
}

#[test]
fn bad_configs_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown field", r#"{"epsilonn": 0.1}"#, "simulate"),
        ("epsilon out of range", r#"{"epsilon": 1.5}"#, "simulate"),
        (
            "zero particles",
            r#"{"profile": {"kind": "tents", "r_min": -3, "r_max": 4, "h": 0.01,
                "u": {"a": -1, "b": 0.5, "mass": 0.001}, "v": {"a": 0, "b": 1.5, "mass": 0.001}}}"#,
            "hydro-compare",
        ),
        ("not class U", r#"{"profile": {"kind": "tents", "r_min": -3, "r_max": 4, "h": 0.01,
                "u": {"a": 0, "b": 1.5, "mass": 1}, "v": {"a": -1, "b": 0.5, "mass": 1}}}"#, "fbp"),
        ("snapshot past horizon", r#"{"simulate": {"snapshot_times": [0.0, 2.0]}}"#, "simulate"),
    ];
    for (name, text, cmd) in cases {
        let cfg = write(d.path(), "c.json", text);
        let o = run(&[cmd, "--config", &cfg, "--out", "run"], d.path());
        assert_eq!(o.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(run(&["no-such-command"], d.path()).status.code(), Some(2));
}

#[test]
fn couple_verify_report_schema() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.json", r#"{"epsilon": 0.1, "couple": {"max_particles": 3, "max_marks": 2}}"#);
    let mut reports = Vec::new();
    for out in ["a", "b"] {
        let o = run(&["couple-verify", "--config", &cfg, "--out", out, "--seeds", "10"], d.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        reports.push(json(&d.path().join(out).join("report.json")));
    }
    let r = &reports[0];
    assert_eq!(r["passed"], true);
    assert_eq!(r["exhaustive"]["violations"], 0);
    assert_eq!(r["sandwich"]["violations"], 0);
    assert_eq!(r["sandwich"]["seeds"], 10);
    for key in ["chi_excluded", "chi_exclusion_rate", "literal_violations", "unclean_blocks"] {
        assert!(r["sandwich"].get(key).is_some(), "{key}");
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn failed_check_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.json", r#"{"barriers": {"deltas": [0.1, 0.05], "arithmetic_steps": [], "max_ratio": 0.1}}"#);
    let o = run(&["barriers", "--config", &cfg, "--out", "run"], d.path());
    assert_eq!(o.status.code(), Some(1));
    let r = json(&d.path().join("run/report.json"));
    assert_eq!(r["passed"], false);
    assert!(r["dyadic_ratios"][0].as_f64().unwrap() > 0.4);
}

#[test]
fn fbp_small_run() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "c.json",
        r#"{"profile": {"kind": "tents", "r_min": -3, "r_max": 4, "h": 0.01,
            "u": {"a": -1, "b": 0.5, "mass": 1}, "v": {"a": 0, "b": 1.5, "mass": 1}},
           "horizon_t": 0.3,
           "fbp": {"delta": 0.004, "record_every": 5, "flux_from": 0.1, "mc_paths": 4000, "mc_times": [0.2],
                   "mc_boundary_h": 0.01, "mc_boundary_delta": 0.004}}"#,
    );
    let o = run(&["fbp", "--config", &cfg, "--out", "run"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&d.path().join("run/report.json"));
    assert!(r["worst_bracket_excess"].as_f64().unwrap() <= 1e-9);
    assert_eq!(r["monte_carlo"]["identities"].as_array().unwrap().len(), 2);
    let b = std::fs::read_to_string(d.path().join("run/boundaries.csv")).unwrap();
    assert_eq!(b.lines().next(), Some("t,u_edge,v_edge,u_front,v_front"));
}
