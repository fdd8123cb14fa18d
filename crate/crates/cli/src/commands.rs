use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;

use rankswap::coupling::{exhaustive_check, verify_sandwich, ExhaustiveReport, SandwichReport};
use rankswap::export::{write_boundaries, write_json, write_occupations, write_profile, write_rows, write_snapshots};
use rankswap::fbp::{
    constant_barrier_oracle, default_intervals, extract_boundaries, flux_at_boundary, hydro_row, mc_validate, solve_reference,
    HydroRow, IdentityCheck, McConfig, OracleCheck, Species,
};
use rankswap::lattice::{simulate_replica, tail_mass, ParticleState, SiteCounts};
use rankswap::macroscopic::{iterate_barriers, l1_distance, tail_excess, ProfilePair};
use rankswap::Variant;

use crate::config::{Config, ConfigError, ProfileSource};
use crate::{Failure, Outcome};

fn config_err(msg: String) -> Failure {
    Failure::Config(ConfigError(msg))
}

/// Collects output file names relative to the run directory.
struct Files<'a> {
    dir: &'a Path,
    names: Vec<String>,
}

impl<'a> Files<'a> {
    fn new(dir: &'a Path) -> Self {
        Self { dir, names: Vec::new() }
    }

    fn path(&mut self, name: &str) -> std::path::PathBuf {
        self.names.push(name.to_string());
        self.dir.join(name)
    }

    fn finish(mut self, report: &impl Serialize, passed: bool) -> Result<Outcome, Failure> {
        write_json(&self.path("report.json"), report)?;
        Ok(Outcome { outputs: self.names, passed })
    }
}

#[derive(Serialize)]
struct SnapshotSummary {
    time: f64,
    mean_a_count: f64,
}

#[derive(Serialize)]
struct SimulateReport {
    particles: usize,
    replicas: u64,
    chi_excluded: usize,
    no_op_flips: usize,
    snapshots: Vec<SnapshotSummary>,
}

#[derive(Serialize)]
struct TailRow {
    time: f64,
    site: i64,
    r: f64,
    tail_a_mean: f64,
    tail_a_se: f64,
    tail_total_mean: f64,
}

pub fn simulate(cfg: &Config, out: &Path) -> Result<Outcome, Failure> {
    let p = cfg.validate(&[cfg.epsilon])?;
    let times = &cfg.simulate.snapshot_times;
    if times.is_empty() || times.windows(2).any(|w| w[1] < w[0]) || times.iter().any(|&t| !(0.0..=cfg.horizon_t).contains(&t)) {
        return Err(config_err(format!("snapshot_times must be non-decreasing within [0, {}]", cfg.horizon_t)));
    }
    let sim = cfg.sim(cfg.epsilon);
    let micro: Vec<f64> = times.iter().map(|&t| sim.micro_time(t)).collect();
    let runs: Vec<(Vec<ParticleState>, bool, usize)> = (0..cfg.seeds)
        .into_par_iter()
        .map(|r| {
            let traj = simulate_replica(&sim, &p, r)?;
            let chi = traj.log().chi_status(traj.initial().count_a(), traj.initial().len(), traj.end()).in_chi;
            Ok((traj.states_at(&micro)?, chi, traj.no_op_flips(traj.end())?))
        })
        .collect::<Result<_, rankswap::lattice::LatticeError>>()
        .context("simulation")?;

    let mut files = Files::new(out);
    let mut states = Vec::new();
    for (r, (s, _, _)) in runs.iter().enumerate() {
        states.extend(s.iter().map(|x| (r as u64, x.clone())));
    }
    write_snapshots(&files.path("snapshots.csv"), &states)?;
    write_occupations(&files.path("occupations.csv"), &states)?;

    let eps = cfg.epsilon;
    let n = runs.len() as f64;
    let mut tails = Vec::new();
    let mut summary = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let counts: Vec<(SiteCounts, SiteCounts)> = runs
            .iter()
            .map(|(s, _, _)| {
                let occ = rankswap::lattice::occupation(&s[k]);
                (occ.xi, occ.eta)
            })
            .collect();
        let lo = runs.iter().filter_map(|(s, _, _)| s[k].positions.iter().min()).min().copied().unwrap_or(0);
        let hi = runs.iter().filter_map(|(s, _, _)| s[k].positions.iter().max()).max().copied().unwrap_or(0);
        for site in lo..=hi + 1 {
            let a: Vec<f64> = counts.iter().map(|(xi, _)| eps * tail_mass(xi, site) as f64).collect();
            let mean = a.iter().sum::<f64>() / n;
            let var = if runs.len() > 1 { a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            let total = counts.iter().map(|(xi, eta)| eps * (tail_mass(xi, site) + tail_mass(eta, site)) as f64).sum::<f64>() / n;
            tails.push(TailRow {
                time: t,
                site,
                r: eps * (site as f64 - 0.5),
                tail_a_mean: mean,
                tail_a_se: (var / n).sqrt(),
                tail_total_mean: total,
            });
        }
        summary.push(SnapshotSummary {
            time: t,
            mean_a_count: runs.iter().map(|(s, _, _)| s[k].count_a() as f64).sum::<f64>() / n,
        });
    }
    write_rows(&files.path("empirical_tails.csv"), &tails)?;
    let report = SimulateReport {
        particles: runs.first().map_or(0, |(s, _, _)| s[0].len()),
        replicas: cfg.seeds,
        chi_excluded: runs.iter().filter(|(_, chi, _)| !chi).count(),
        no_op_flips: runs.iter().map(|(_, _, n)| n).sum(),
        snapshots: summary,
    };
    files.finish(&report, true)
}

#[derive(Serialize)]
struct CoupleReport {
    passed: bool,
    exhaustive: Option<ExhaustiveReport>,
    sandwich: Option<SandwichReport>,
}

pub fn couple_verify(cfg: &Config, out: &Path) -> Result<Outcome, Failure> {
    let c = &cfg.couple;
    if !c.exhaustive && !c.sandwich {
        return Err(config_err("couple: enable exhaustive, sandwich or both".into()));
    }
    let mut files = Files::new(out);
    let mut passed = true;
    let exhaustive = c.exhaustive.then(|| exhaustive_check(c.max_particles, c.n_sites, c.max_marks));
    if let Some(r) = &exhaustive {
        passed &= r.violations == 0;
    }
    let sandwich = if c.sandwich {
        let p = cfg.validate(&[cfg.epsilon])?;
        if !(c.delta > 0.0 && c.delta <= cfg.horizon_t) {
            return Err(config_err(format!("couple.delta must lie in (0, horizon_t], got {}", c.delta)));
        }
        let mut r = verify_sandwich(&cfg.sim(cfg.epsilon), &p, c.delta, cfg.seeds);
        write_rows(&files.path("sandwich_seeds.csv"), &r.outcomes)?;
        passed &= r.passed();
        r.outcomes.clear();
        Some(r)
    } else {
        None
    };
    files.finish(&CoupleReport { passed, exhaustive, sandwich }, passed)
}

#[derive(Serialize)]
struct SweepRow {
    sweep: &'static str,
    delta: f64,
    steps: usize,
    l1_gap: f64,
    ratio: Option<f64>,
    order_excess: f64,
}

#[derive(Serialize)]
struct BarrierReport {
    passed: bool,
    kappa: f64,
    horizon_t: f64,
    dyadic_ratios: Vec<f64>,
    worst_order_excess: f64,
}

fn sweep_point(p0: &ProfilePair, kappa: f64, delta: f64, n: usize) -> anyhow::Result<(f64, f64, ProfilePair, ProfilePair)> {
    let plus = iterate_barriers(p0, delta, kappa, n, Variant::Plus)?.pop().expect("n + 1 profiles");
    let minus = iterate_barriers(p0, delta, kappa, n, Variant::Minus)?.pop().expect("n + 1 profiles");
    let gap = l1_distance(plus.grid(), plus.u(), minus.grid(), minus.u())? + l1_distance(plus.grid(), plus.v(), minus.grid(), minus.v())?;
    let excess = tail_excess(&minus.tail_u(), &plus.tail_u()).0;
    Ok((gap, excess, plus, minus))
}

pub fn barriers(cfg: &Config, out: &Path) -> Result<Outcome, Failure> {
    let p0 = cfg.validate(&[cfg.epsilon])?;
    let b = &cfg.barriers;
    let t = cfg.horizon_t;
    let mut dyadic = Vec::new();
    for &d in &b.deltas {
        let n = (t / d).round() as usize;
        if !(d > 0.0) || n == 0 || (n as f64 * d - t).abs() > 1e-9 * t {
            return Err(config_err(format!("barriers.deltas: {d} does not divide horizon_t {t}")));
        }
        dyadic.push((d, n));
    }
    if b.arithmetic_steps.contains(&0) {
        return Err(config_err("barriers.arithmetic_steps must be positive".into()));
    }
    let points: Vec<_> = dyadic
        .par_iter()
        .map(|&(d, n)| sweep_point(&p0, cfg.kappa, d, n))
        .collect::<anyhow::Result<_>>()?;
    let arith: Vec<_> = b
        .arithmetic_steps
        .par_iter()
        .map(|&n| sweep_point(&p0, cfg.kappa, t / n as f64, n).map(|x| (x.0, x.1)))
        .collect::<anyhow::Result<_>>()?;

    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for (i, (&(d, n), pt)) in dyadic.iter().zip(&points).enumerate() {
        let ratio = (i > 0).then(|| pt.0 / points[i - 1].0);
        ratios.extend(ratio);
        rows.push(SweepRow { sweep: "dyadic", delta: d, steps: n, l1_gap: pt.0, ratio, order_excess: pt.1 });
    }
    for (&n, &(gap, excess)) in b.arithmetic_steps.iter().zip(&arith) {
        rows.push(SweepRow { sweep: "arithmetic", delta: t / n as f64, steps: n, l1_gap: gap, ratio: None, order_excess: excess });
    }
    let worst = rows.iter().map(|r| r.order_excess).fold(f64::NEG_INFINITY, f64::max);
    let passed = worst <= b.order_tol && ratios.iter().all(|&r| r <= b.max_ratio);

    let mut files = Files::new(out);
    write_rows(&files.path("barriers.csv"), &rows)?;
    if let Some((_, _, plus, minus)) = points.last() {
        write_profile(&files.path("profile_plus.csv"), plus)?;
        write_profile(&files.path("profile_minus.csv"), minus)?;
    }
    let report = BarrierReport { passed, kappa: cfg.kappa, horizon_t: t, dyadic_ratios: ratios, worst_order_excess: worst };
    files.finish(&report, passed)
}

#[derive(Serialize)]
struct BracketRow {
    t: f64,
    bracket_width: f64,
    bracket_excess: f64,
    u_flux: Option<f64>,
    v_flux: Option<f64>,
}

#[derive(Serialize)]
struct IntervalRow {
    species: Species,
    t: f64,
    lo: f64,
    hi: f64,
    profile_mass: f64,
    estimate: f64,
    std_err: f64,
    z: f64,
}

#[derive(Serialize)]
struct McSummary {
    n_paths: usize,
    dt: f64,
    boundary_h: f64,
    boundary_delta: f64,
    oracle: Vec<OracleCheck>,
    identities: Vec<IdentityCheck>,
    max_interval_z: f64,
}

#[derive(Serialize)]
struct FbpReport {
    passed: bool,
    kappa: f64,
    delta: f64,
    end_time: f64,
    regime_exit: Option<String>,
    mass_drift: f64,
    worst_bracket_excess: f64,
    final_bracket_width: f64,
    mean_u_flux: Option<f64>,
    mean_v_flux: Option<f64>,
    flux_times: usize,
    monte_carlo: Option<McSummary>,
}

fn grid_h(src: &ProfileSource, p: &ProfilePair) -> f64 {
    match src {
        ProfileSource::Tents { h, .. } => *h,
        ProfileSource::File { .. } => p.grid().h,
    }
}

pub fn fbp(cfg: &Config, out: &Path) -> Result<Outcome, Failure> {
    let p0 = cfg.validate(&[cfg.epsilon])?;
    let f = &cfg.fbp;
    if f.record_every == 0 || !(f.delta > 0.0) {
        return Err(config_err("fbp: need delta > 0 and record_every > 0".into()));
    }
    if f.mc_times.iter().any(|&t| !(t > 0.0 && t <= cfg.horizon_t)) {
        return Err(config_err(format!("fbp.mc_times must lie in (0, {}]", cfg.horizon_t)));
    }
    let sol = solve_reference(&p0, cfg.kappa, cfg.horizon_t, f.delta, f.record_every).context("reference solve")?;
    let mut files = Files::new(out);
    write_boundaries(&files.path("boundaries.csv"), &extract_boundaries(&sol).context("boundaries")?)?;
    let rows: Vec<BracketRow> = sol
        .times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let flux = flux_at_boundary(&sol, t).ok();
            BracketRow {
                t,
                bracket_width: sol.bracket_width[k],
                bracket_excess: sol.bracket_excess[k],
                u_flux: flux.map(|x| x.0),
                v_flux: flux.map(|x| x.1),
            }
        })
        .collect();
    write_rows(&files.path("bracket.csv"), &rows)?;
    if let (Some(m), Some(p)) = (sol.minus.last(), sol.plus.last()) {
        write_profile(&files.path("profile_minus.csv"), m)?;
        write_profile(&files.path("profile_plus.csv"), p)?;
    }

    let window: Vec<&BracketRow> = rows.iter().filter(|r| r.t >= f.flux_from - 1e-9 && r.u_flux.is_some()).collect();
    let mean = |g: fn(&BracketRow) -> f64| (!window.is_empty()).then(|| window.iter().map(|r| g(r)).sum::<f64>() / window.len() as f64);
    let (mu, mv) = (mean(|r| r.u_flux.unwrap_or(0.0)), mean(|r| r.v_flux.unwrap_or(0.0)));
    let worst_excess = sol.bracket_excess.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut passed = worst_excess <= 1e-9;
    if cfg.kappa > 0.0 {
        let k = cfg.kappa;
        passed &= matches!((mu, mv), (Some(u), Some(v)) if (u - k).abs() <= f.flux_tol * k && (v + k).abs() <= f.flux_tol * k);
    }

    let monte_carlo = if f.mc_paths > 0 && !f.mc_times.is_empty() && sol.regime_exit.is_none() {
        let mc = McConfig { n_paths: f.mc_paths, dt: f.mc_dt, seed: cfg.seed };
        let horizon = f.mc_times.iter().copied().fold(0.0, f64::max);
        let fine = if f.mc_boundary_h == grid_h(&cfg.profile, &p0) && f.mc_boundary_delta == f.delta {
            sol.clone()
        } else {
            let pf = cfg.profile.build(Some(f.mc_boundary_h))?;
            let every = ((f.record_every as f64 * f.delta / f.mc_boundary_delta).round() as usize).max(1);
            solve_reference(&pf, cfg.kappa, horizon, f.mc_boundary_delta, every).context("boundary reference solve")?
        };
        let oracle = constant_barrier_oracle(0.0, 0.5, 0.25, &mc);
        passed &= oracle.iter().all(|o| o.z.abs() <= f.identity_z);
        let mut identities = Vec::new();
        let mut intervals = Vec::new();
        for &t in &f.mc_times {
            for species in [Species::U, Species::V] {
                let iv = default_intervals(&fine, species, t);
                let r = mc_validate(&fine, species, t, &iv, &mc).context("monte carlo")?;
                intervals.extend(r.intervals.iter().map(|c| IntervalRow {
                    species,
                    t,
                    lo: c.lo,
                    hi: c.hi,
                    profile_mass: c.profile_mass,
                    estimate: c.estimate,
                    std_err: c.std_err,
                    z: c.z,
                }));
                identities.push(r.identity);
            }
        }
        write_rows(&files.path("mc_intervals.csv"), &intervals)?;
        let max_interval_z = intervals.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
        passed &= max_interval_z <= f.interval_z && identities.iter().all(|c| c.z.abs() <= f.identity_z);
        Some(McSummary {
            n_paths: f.mc_paths,
            dt: f.mc_dt,
            boundary_h: f.mc_boundary_h,
            boundary_delta: f.mc_boundary_delta,
            oracle,
            identities,
            max_interval_z,
        })
    } else {
        None
    };

    let report = FbpReport {
        passed,
        kappa: cfg.kappa,
        delta: f.delta,
        end_time: sol.end_time(),
        regime_exit: sol.regime_exit.clone(),
        mass_drift: sol.mass_drift,
        worst_bracket_excess: worst_excess,
        final_bracket_width: sol.bracket_width.last().copied().unwrap_or(0.0),
        mean_u_flux: mu,
        mean_v_flux: mv,
        flux_times: window.len(),
        monte_carlo,
    };
    files.finish(&report, passed)
}

#[derive(Serialize)]
struct HydroReport {
    passed: bool,
    monotone: bool,
    finest_epsilon: f64,
    finest_band_violations: usize,
    finest_heat_dev: f64,
    rows: Vec<HydroRow>,
}

pub fn hydro_compare(cfg: &Config, out: &Path) -> Result<Outcome, Failure> {
    let h = &cfg.hydro;
    if h.epsilons.is_empty() {
        return Err(config_err("hydro.epsilons is empty".into()));
    }
    let p0 = cfg.validate(&h.epsilons)?;
    let n = (cfg.horizon_t / h.delta).round() as usize;
    if !(h.delta > 0.0) || n == 0 {
        return Err(config_err(format!("hydro.delta must lie in (0, horizon_t], got {}", h.delta)));
    }
    let sol = solve_reference(&p0, cfg.kappa, cfg.horizon_t, h.delta, n).context("reference solve")?;
    let mut eps = h.epsilons.clone();
    eps.sort_by(|a, b| b.total_cmp(a));
    let rows: Vec<HydroRow> = eps
        .iter()
        .map(|&e| hydro_row(&sol, &cfg.sim(e), cfg.seeds))
        .collect::<Result<_, _>>()
        .context("particle runs")?;
    let monotone = rows.windows(2).all(|w| w[1].mean_sup_dev < w[0].mean_sup_dev);
    let last = rows.last().expect("nonempty");
    let passed = monotone && last.band_violations == 0 && last.heat_dev <= h.heat_tol;
    let mut files = Files::new(out);
    write_rows(&files.path("hydro.csv"), &rows)?;
    let report = HydroReport {
        passed,
        monotone,
        finest_epsilon: last.epsilon,
        finest_band_violations: last.band_violations,
        finest_heat_dev: last.heat_dev,
        rows,
    };
    files.finish(&report, passed)
}
