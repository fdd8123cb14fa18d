//! Run configuration. Every field has a default listed in the README; a
//! config file only needs the fields it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rankswap::lattice::{particle_count, SimConfig};
use rankswap::macroscopic::{tent, validate_class_u, GridSpec, ProfilePair};

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub seeds: u64,
    pub epsilon: f64,
    pub kappa: f64,
    pub horizon_t: f64,
    pub walk_rate: f64,
    pub profile: ProfileSource,
    pub simulate: SimulateOpts,
    pub couple: CoupleOpts,
    pub barriers: BarrierOpts,
    pub fbp: FbpOpts,
    pub hydro: HydroOpts,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 100,
            epsilon: 0.05,
            kappa: 0.5,
            horizon_t: 0.5,
            walk_rate: 1.0,
            profile: ProfileSource::default(),
            simulate: SimulateOpts::default(),
            couple: CoupleOpts::default(),
            barriers: BarrierOpts::default(),
            fbp: FbpOpts::default(),
            hydro: HydroOpts::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tent {
    pub a: f64,
    pub b: f64,
    pub mass: f64,
}

/// Initial data: two tents on a uniform grid, or a CSV file with columns
/// `r,u,v` on uniformly spaced nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSource {
    Tents { r_min: f64, r_max: f64, h: f64, u: Tent, v: Tent },
    File { path: PathBuf },
}

impl Default for ProfileSource {
    fn default() -> Self {
        ProfileSource::Tents {
            r_min: -3.0,
            r_max: 4.0,
            h: 5e-3,
            u: Tent { a: -1.0, b: 0.5, mass: 1.0 },
            v: Tent { a: 0.0, b: 1.5, mass: 1.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateOpts {
    /// Macroscopic times at which states are written; must not exceed `horizon_t`.
    pub snapshot_times: Vec<f64>,
}

impl Default for SimulateOpts {
    fn default() -> Self {
        Self { snapshot_times: vec![0.0, 0.25, 0.5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoupleOpts {
    pub exhaustive: bool,
    pub max_particles: usize,
    pub n_sites: usize,
    pub max_marks: usize,
    pub sandwich: bool,
    pub delta: f64,
}

impl Default for CoupleOpts {
    fn default() -> Self {
        Self { exhaustive: true, max_particles: 4, n_sites: 4, max_marks: 3, sandwich: true, delta: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarrierOpts {
    /// Dyadic sweep; each entry should divide `horizon_t`.
    pub deltas: Vec<f64>,
    /// Step counts of the arithmetic sweep, reported without a check.
    pub arithmetic_steps: Vec<usize>,
    /// Largest accepted ratio of successive dyadic gaps.
    pub max_ratio: f64,
    pub order_tol: f64,
}

impl Default for BarrierOpts {
    fn default() -> Self {
        Self {
            deltas: vec![0.1, 0.05, 0.025, 0.0125],
            arithmetic_steps: vec![5, 10, 15, 20, 25, 30],
            max_ratio: 0.9,
            order_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbpOpts {
    pub delta: f64,
    pub record_every: usize,
    /// Flux is averaged over stored times in `[flux_from, horizon_t]`.
    pub flux_from: f64,
    pub flux_tol: f64,
    /// Zero switches the Monte Carlo validation off.
    pub mc_paths: usize,
    pub mc_dt: f64,
    pub mc_times: Vec<f64>,
    /// Resolution of the reference solve that supplies the absorbing curves.
    pub mc_boundary_h: f64,
    pub mc_boundary_delta: f64,
    pub identity_z: f64,
    pub interval_z: f64,
}

impl Default for FbpOpts {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            record_every: 10,
            flux_from: 0.1,
            flux_tol: 0.1,
            mc_paths: 100_000,
            mc_dt: 1e-4,
            mc_times: vec![0.1, 0.25],
            mc_boundary_h: 2.5e-3,
            mc_boundary_delta: 2.5e-4,
            identity_z: 3.0,
            interval_z: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HydroOpts {
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub heat_tol: f64,
}

impl Default for HydroOpts {
    fn default() -> Self {
        Self { epsilons: vec![0.1, 0.05, 0.02], delta: 1e-3, heat_tol: 0.05 }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Config = serde_json::from_str(&text).map_err(|e| bad(format!("config {}: {e}", path.display())))?;
        // Relative profile paths are taken relative to the config file.
        if let ProfileSource::File { path: p } = &mut cfg.profile {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn sim(&self, epsilon: f64) -> SimConfig {
        SimConfig { epsilon, kappa: self.kappa, horizon_t: self.horizon_t, seed: self.seed, walk_rate: self.walk_rate }
    }

    /// Checks shared by every subcommand: physical parameters, admissible
    /// initial data and a nonempty particle system at `epsilons`.
    pub fn validate(&self, epsilons: &[f64]) -> Result<ProfilePair, ConfigError> {
        if self.seeds == 0 {
            return Err(bad("seeds must be positive"));
        }
        for &e in epsilons {
            self.sim(e).validate().map_err(|e| bad(e.to_string()))?;
        }
        let p = self.profile.build(None)?;
        let report = validate_class_u(&p);
        if !report.valid {
            return Err(bad(format!("initial profile is not admissible: {}", report.violations.join("; "))));
        }
        for &e in epsilons {
            if particle_count(p.total_mass(), e) == 0 {
                return Err(bad(format!("the profile has mass {} and yields no particles at epsilon {e}", p.total_mass())));
            }
        }
        Ok(p)
    }
}

impl ProfileSource {
    /// The profile on its own grid, or resampled to spacing `h`.
    pub fn build(&self, h: Option<f64>) -> Result<ProfilePair, ConfigError> {
        match self {
            ProfileSource::Tents { r_min, r_max, h: h0, u, v } => {
                let g = GridSpec::with_spacing(*r_min, *r_max, h.unwrap_or(*h0)).map_err(|e| bad(format!("profile grid: {e}")))?;
                ProfilePair::from_fns(g, tent(u.a, u.b, u.mass), tent(v.a, v.b, v.mass)).map_err(|e| bad(format!("profile: {e}")))
            }
            ProfileSource::File { path } => {
                let p = read_profile(path)?;
                match h {
                    None => Ok(p),
                    Some(h) => {
                        let g = GridSpec::with_spacing(p.grid().r_min, p.grid().r_max(), h)
                            .map_err(|e| bad(format!("profile grid: {e}")))?;
                        ProfilePair::from_fns(g, |r| p.eval(r).0, |r| p.eval(r).1).map_err(|e| bad(format!("profile: {e}")))
                    }
                }
            }
        }
    }
}

#[derive(Deserialize)]
struct ProfileRow {
    r: f64,
    u: f64,
    v: f64,
}

fn read_profile(path: &Path) -> Result<ProfilePair, ConfigError> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| bad(format!("profile file {}: {e}", path.display())))?;
    let rows: Vec<ProfileRow> = rd
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| bad(format!("profile file {}: {e}", path.display())))?;
    if rows.len() < 3 {
        return Err(bad(format!("profile file {}: need at least 3 rows", path.display())));
    }
    let n = rows.len() - 1;
    let (r0, r1) = (rows[0].r, rows[n].r);
    let g = GridSpec::new(r0, r1, n).map_err(|e| bad(format!("profile file {}: {e}", path.display())))?;
    for (i, row) in rows.iter().enumerate() {
        if (row.r - g.node(i)).abs() > 1e-6 * g.h {
            return Err(bad(format!("profile file {}: nodes are not uniformly spaced at row {}", path.display(), i + 2)));
        }
    }
    ProfilePair::new(g, rows.iter().map(|x| x.u).collect(), rows.iter().map(|x| x.v).collect())
        .map_err(|e| bad(format!("profile file {}: {e}", path.display())))
}
