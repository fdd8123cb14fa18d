//! Free-boundary reference solution and its validation.
//!
//! The reference solution is the pair of barrier iterations at a fine `delta`;
//! the solution is reported as the bracket `(minus, plus)` with its midpoint.
//! Boundaries, fluxes and the boundary curves used by the Monte Carlo checks
//! are read from the minus iteration, whose profile ends at the cut point and
//! so vanishes linearly at the front.
//!
//! The Monte Carlo side simulates Brownian paths absorbed at a moving front
//! (Euler steps with a Brownian-bridge crossing correction) and checks the
//! probabilistic representation of the `u` mass and the outgoing-mass
//! identity, with the mirrored statements for `v`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::macroscopic::{
    barrier_step, midpoint, tail_excess, validate_class_u, GridSpec, MacroError, ProfilePair, TailFn,
};
use crate::lattice::{ParticleState, SimConfig};
use crate::rng::{substream, Stream};
use crate::Variant;

/// Relative threshold defining the numerical support edge.
pub const EDGE_THRESHOLD: f64 = 1e-6;
/// Cells next to the edge left out of the slope fit.
pub const FIT_SKIP: usize = 2;
/// Cells in the slope fit.
pub const FIT_WINDOW: usize = 5;
/// Paths per Monte Carlo chunk; chunks own their random streams.
const CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FbpError {
    #[error("initial data not admissible: {0}")]
    NotClassU(String),
    #[error(transparent)]
    Macro(#[from] MacroError),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("{0} has empty support")]
    EmptySupport(&'static str),
    #[error("fit window leaves the grid")]
    Window,
    #[error("time {t} outside the solved range [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
}

/// Time-sampled fronts. `u_edge`/`v_edge` are the threshold support edges;
/// `u_front`/`v_front` are the zero crossings of a linear fit just behind the
/// smoothing layer at the edge (see [`layer_skip`]), which the Monte Carlo
/// checks use as absorbing curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCurves {
    pub times: Vec<f64>,
    pub u_edge: Vec<f64>,
    pub v_edge: Vec<f64>,
    pub u_front: Vec<f64>,
    pub v_front: Vec<f64>,
}

impl BoundaryCurves {
    fn at(times: &[f64], vals: &[f64], t: f64) -> f64 {
        let k = times.partition_point(|&s| s <= t);
        if k == 0 {
            return vals[0];
        }
        if k >= times.len() {
            return vals[vals.len() - 1];
        }
        let (t0, t1) = (times[k - 1], times[k]);
        vals[k - 1] + (t - t0) / (t1 - t0) * (vals[k] - vals[k - 1])
    }

    pub fn u_front_at(&self, t: f64) -> f64 {
        Self::at(&self.times, &self.u_front, t)
    }

    pub fn v_front_at(&self, t: f64) -> f64 {
        Self::at(&self.times, &self.v_front, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FbpSolution {
    pub kappa: f64,
    pub delta: f64,
    pub horizon_t: f64,
    /// Times of the stored profiles.
    pub times: Vec<f64>,
    pub minus: Vec<ProfilePair>,
    pub plus: Vec<ProfilePair>,
    /// `sup_r [F(r; u_plus) - F(r; u_minus)]` at each stored time.
    pub bracket_width: Vec<f64>,
    /// `sup_r [F(r; u_minus) - F(r; u_plus)]`; positive values break the bracket.
    pub bracket_excess: Vec<f64>,
    /// Largest relative per-species mass change over all steps.
    pub mass_drift: f64,
    /// Boundaries of the minus iteration after every step.
    pub boundaries: BoundaryCurves,
    /// Why the solve stopped early, if it did.
    pub regime_exit: Option<String>,
}

impl FbpSolution {
    /// Index of the stored time closest to `t`.
    pub fn index_near(&self, t: f64) -> usize {
        (0..self.times.len())
            .min_by(|&a, &b| (self.times[a] - t).abs().total_cmp(&(self.times[b] - t).abs()))
            .unwrap_or(0)
    }

    pub fn midpoint(&self, k: usize) -> ProfilePair {
        midpoint(&self.minus[k], &self.plus[k]).expect("both iterations share the grid lattice")
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }
}

/// Right threshold edge of `f`: node index of the last sample above
/// threshold and the interpolated crossing point.
fn right_edge(grid: &GridSpec, f: &[f64]) -> Option<(usize, f64)> {
    let peak = f.iter().cloned().fold(0.0, f64::max);
    let thr = EDGE_THRESHOLD * peak;
    let i = f.iter().rposition(|&x| x > thr)?;
    if i + 1 >= f.len() {
        return Some((i, grid.node(i)));
    }
    let (a, b) = (f[i], f[i + 1]);
    Some((i, grid.node(i) + grid.h * (a - thr) / (a - b)))
}

fn left_edge(grid: &GridSpec, f: &[f64]) -> Option<(usize, f64)> {
    let peak = f.iter().cloned().fold(0.0, f64::max);
    let thr = EDGE_THRESHOLD * peak;
    let i = f.iter().position(|&x| x > thr)?;
    if i == 0 {
        return Some((i, grid.node(0)));
    }
    let (a, b) = (f[i - 1], f[i]);
    Some((i, grid.node(i - 1) + grid.h * (thr - a) / (b - a)))
}

/// Least-squares line through `(r_k, f_k)` over the given node indices.
fn line_fit(grid: &GridSpec, f: &[f64], ids: std::ops::RangeInclusive<usize>) -> (f64, f64) {
    let n = ids.clone().count() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for i in ids {
        let (x, y) = (grid.node(i), f[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope, (sy - slope * sx) / n)
}

fn fit_ids(edge: usize, right: bool, skip: usize, n_nodes: usize) -> Result<std::ops::RangeInclusive<usize>, FbpError> {
    if right {
        let hi = edge.checked_sub(skip).ok_or(FbpError::Window)?;
        let lo = (hi + 1).checked_sub(FIT_WINDOW).ok_or(FbpError::Window)?;
        Ok(lo..=hi)
    } else {
        let lo = edge + skip;
        let hi = lo + FIT_WINDOW - 1;
        if hi >= n_nodes {
            return Err(FbpError::Window);
        }
        Ok(lo..=hi)
    }
}

/// Edges, fronts and slopes of one profile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontFit {
    pub u_edge: f64,
    pub v_edge: f64,
    pub u_front: f64,
    pub v_front: f64,
    pub u_slope: f64,
    pub v_slope: f64,
}

/// Cells skipped by the front fit used for the absorbing curves: the cut
/// leaves a smoothing layer about `sqrt(delta)` wide at the edge, and the
/// linear part of the profile starts behind it.
pub fn layer_skip(h: f64, delta: f64) -> usize {
    FIT_SKIP.max((delta.sqrt() / h).ceil() as usize)
}

/// Edges plus linear fits over `FIT_WINDOW` cells, `skip` cells in from each edge.
pub fn fit_fronts(p: &ProfilePair, skip: usize) -> Result<FrontFit, FbpError> {
    let g = p.grid();
    let (iu, u_edge) = right_edge(g, p.u()).ok_or(FbpError::EmptySupport("u"))?;
    let (iv, v_edge) = left_edge(g, p.v()).ok_or(FbpError::EmptySupport("v"))?;
    let (su, cu) = line_fit(g, p.u(), fit_ids(iu, true, skip, g.n_nodes())?);
    let (sv, cv) = line_fit(g, p.v(), fit_ids(iv, false, skip, g.n_nodes())?);
    let front = |s: f64, c: f64, edge: f64| if s != 0.0 && (-c / s).is_finite() { -c / s } else { edge };
    Ok(FrontFit {
        u_edge,
        v_edge,
        u_front: front(su, cu, u_edge),
        v_front: front(sv, cv, v_edge),
        u_slope: su,
        v_slope: sv,
    })
}

/// Both barrier iterations from `p0` up to `horizon_t` with step `delta`,
/// storing profiles every `record_every` steps (and at the end).
pub fn solve_reference(
    p0: &ProfilePair,
    kappa: f64,
    horizon_t: f64,
    delta: f64,
    record_every: usize,
) -> Result<FbpSolution, FbpError> {
    let report = validate_class_u(p0);
    if !report.valid {
        return Err(FbpError::NotClassU(report.violations.join("; ")));
    }
    if !(delta > 0.0 && horizon_t > 0.0 && kappa >= 0.0) || record_every == 0 {
        return Err(FbpError::Parameter(format!(
            "need delta > 0, horizon > 0, kappa >= 0, record_every > 0; got {delta}, {horizon_t}, {kappa}, {record_every}"
        )));
    }
    let n = (horizon_t / delta).round() as usize;
    let (m_u, m_v) = (p0.mass_u(), p0.mass_v());
    let mut sol = FbpSolution {
        kappa,
        delta,
        horizon_t,
        times: vec![0.0],
        minus: vec![p0.clone()],
        plus: vec![p0.clone()],
        bracket_width: vec![0.0],
        bracket_excess: vec![0.0],
        mass_drift: 0.0,
        boundaries: BoundaryCurves {
            times: Vec::new(),
            u_edge: Vec::new(),
            v_edge: Vec::new(),
            u_front: Vec::new(),
            v_front: Vec::new(),
        },
        regime_exit: None,
    };
    let skip = layer_skip(p0.grid().h, delta);
    let push_bounds = |b: &mut BoundaryCurves, t: f64, p: &ProfilePair| -> Result<FrontFit, FbpError> {
        let f = fit_fronts(p, skip)?;
        b.times.push(t);
        b.u_edge.push(f.u_edge);
        b.v_edge.push(f.v_edge);
        b.u_front.push(f.u_front);
        b.v_front.push(f.v_front);
        Ok(f)
    };
    push_bounds(&mut sol.boundaries, 0.0, p0)?;
    let (mut minus, mut plus) = (p0.clone(), p0.clone());
    for k in 1..=n {
        let t = k as f64 * delta;
        if kappa * t >= m_u.min(m_v) {
            sol.regime_exit = Some(format!("species annihilation: kappa t = {} reaches the smaller mass", kappa * t));
            break;
        }
        let step = barrier_step(&minus, delta, kappa, Variant::Minus)
            .and_then(|m| Ok((m, barrier_step(&plus, delta, kappa, Variant::Plus)?)));
        match step {
            Ok((m, p)) => {
                minus = m;
                plus = p;
            }
            Err(e) => {
                sol.regime_exit = Some(e.to_string());
                break;
            }
        }
        for q in [&minus, &plus] {
            sol.mass_drift = sol
                .mass_drift
                .max(((q.mass_u() - m_u) / m_u).abs())
                .max(((q.mass_v() - m_v) / m_v).abs());
        }
        let f = push_bounds(&mut sol.boundaries, t, &minus)?;
        if f.v_front >= f.u_front {
            sol.regime_exit = Some(format!("fronts crossed at t = {t}: V = {}, U = {}", f.v_front, f.u_front));
        }
        if k % record_every == 0 || k == n || sol.regime_exit.is_some() {
            sol.times.push(t);
            sol.bracket_width.push(tail_excess(&plus.tail_u(), &minus.tail_u()).0);
            sol.bracket_excess.push(tail_excess(&minus.tail_u(), &plus.tail_u()).0);
            sol.minus.push(minus.clone());
            sol.plus.push(plus.clone());
        }
        if sol.regime_exit.is_some() {
            break;
        }
    }
    Ok(sol)
}

/// Boundary curves of the stored minus profiles.
pub fn extract_boundaries(sol: &FbpSolution) -> Result<BoundaryCurves, FbpError> {
    let mut b = BoundaryCurves {
        times: Vec::new(),
        u_edge: Vec::new(),
        v_edge: Vec::new(),
        u_front: Vec::new(),
        v_front: Vec::new(),
    };
    let skip = layer_skip(sol.minus[0].grid().h, sol.delta);
    for (t, p) in sol.times.iter().zip(&sol.minus) {
        let f = fit_fronts(p, skip)?;
        b.times.push(*t);
        b.u_edge.push(f.u_edge);
        b.v_edge.push(f.v_edge);
        b.u_front.push(f.u_front);
        b.v_front.push(f.v_front);
    }
    Ok(b)
}

/// `(-u_r(U-)/2, -v_r(V+)/2)` at the stored time nearest `t`, from a linear
/// fit over the cells next to the support edges.
pub fn flux_at_boundary(sol: &FbpSolution, t: f64) -> Result<(f64, f64), FbpError> {
    flux_with_skip(sol, t, FIT_SKIP)
}

/// As [`flux_at_boundary`] with the fit window `skip` cells in from the edges.
pub fn flux_with_skip(sol: &FbpSolution, t: f64, skip: usize) -> Result<(f64, f64), FbpError> {
    let lo = 5.0 * sol.delta;
    if t < lo || t > sol.end_time() + 1e-12 {
        return Err(FbpError::OutOfRange { t, lo, hi: sol.end_time() });
    }
    let f = fit_fronts(&sol.minus[sol.index_near(t)], skip)?;
    Ok((-0.5 * f.u_slope, -0.5 * f.v_slope))
}

/// Which species a Monte Carlo estimate concerns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    U,
    V,
}

/// Absorbing curve for Brownian paths.
pub trait Barrier: Sync {
    fn level(&self, t: f64) -> f64;
    /// `true` when the absorbing region lies above the curve.
    fn upper(&self) -> bool;
}

/// Constant level, for the reflection-principle oracle.
#[derive(Clone, Copy, Debug)]
pub struct ConstantBarrier {
    pub level: f64,
    pub upper: bool,
}

impl Barrier for ConstantBarrier {
    fn level(&self, _t: f64) -> f64 {
        self.level
    }
    fn upper(&self) -> bool {
        self.upper
    }
}

/// A front of a [`BoundaryCurves`], linear in time between samples.
#[derive(Clone, Copy, Debug)]
pub struct FrontBarrier<'a> {
    pub curves: &'a BoundaryCurves,
    pub species: Species,
}

impl Barrier for FrontBarrier<'_> {
    fn level(&self, t: f64) -> f64 {
        match self.species {
            Species::U => self.curves.u_front_at(t),
            Species::V => self.curves.v_front_at(t),
        }
    }
    fn upper(&self) -> bool {
        self.species == Species::U
    }
}

/// Run one path from `(x, s)` to time `t`; returns the end point, or `None`
/// if the path was absorbed.
pub fn absorbed_path<R: Rng + ?Sized>(
    barrier: &impl Barrier,
    mut x: f64,
    s: f64,
    t: f64,
    dt: f64,
    rng: &mut R,
) -> Option<f64> {
    let sign = if barrier.upper() { 1.0 } else { -1.0 };
    // Distance to the barrier, positive while alive.
    let gap = |x: f64, tt: f64| sign * (barrier.level(tt) - x);
    let mut now = s;
    let mut a1 = gap(x, now);
    if a1 <= 0.0 {
        return None;
    }
    while now < t {
        let h = dt.min(t - now);
        let z: f64 = StandardNormal.sample(rng);
        x += h.sqrt() * z;
        now += h;
        let a2 = gap(x, now);
        if a2 <= 0.0 {
            return None;
        }
        if rng.random::<f64>() < (-2.0 * a1 * a2 / h).exp() {
            return None;
        }
        a1 = a2;
    }
    Some(x)
}

/// Sample a point from the piecewise-constant density of `f` on `grid`.
pub struct DensitySampler {
    grid: GridSpec,
    index: WeightedIndex<f64>,
}

impl DensitySampler {
    pub fn new(grid: &GridSpec, f: &[f64]) -> Option<Self> {
        let w: Vec<f64> = f.iter().enumerate().map(|(i, &x)| grid.weight(i) * x).collect();
        Some(Self { grid: *grid, index: WeightedIndex::new(&w).ok()? })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let i = self.index.sample(rng);
        let (lo, hi) = self.grid.dual_cell(i);
        lo + (hi - lo) * rng.random::<f64>()
    }
}

/// Monte Carlo settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_paths: 100_000, dt: 1e-4, seed: 0 }
    }
}

/// End points (or absorption) of the two path families behind one species'
/// representation at time `t`.
struct PathSample {
    /// Paths started from the initial density at time 0.
    initial: Vec<Option<f64>>,
    /// Paths started on the opposite front at a uniform time in `(0, t)`.
    source: Vec<Option<f64>>,
}

fn simulate(sol: &FbpSolution, species: Species, t: f64, mc: &McConfig) -> Result<PathSample, FbpError> {
    if mc.n_paths == 0 || !(mc.dt > 0.0) {
        return Err(FbpError::Parameter("need n_paths > 0 and dt > 0".into()));
    }
    if !(t > 0.0) || t > sol.end_time() + 1e-12 {
        return Err(FbpError::OutOfRange { t, lo: 0.0, hi: sol.end_time() });
    }
    let p0 = &sol.minus[0];
    let f0 = match species {
        Species::U => p0.u(),
        Species::V => p0.v(),
    };
    let sampler = DensitySampler::new(p0.grid(), f0).ok_or(FbpError::EmptySupport("initial density"))?;
    let barrier = FrontBarrier { curves: &sol.boundaries, species };
    let chunks = mc.n_paths.div_ceil(CHUNK);
    let run = |stream_id: u64| -> Vec<Option<f64>> {
        (0..chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = substream(mc.seed, Stream::MonteCarlo, 2 * c as u64 + stream_id);
                let n = CHUNK.min(mc.n_paths - c * CHUNK);
                (0..n)
                    .map(|_| {
                        if stream_id == 0 {
                            let x = sampler.sample(&mut rng);
                            absorbed_path(&barrier, x, 0.0, t, mc.dt, &mut rng)
                        } else {
                            let s = t * rng.random::<f64>();
                            let x = match species {
                                Species::U => sol.boundaries.v_front_at(s),
                                Species::V => sol.boundaries.u_front_at(s),
                            };
                            absorbed_path(&barrier, x, s, t, mc.dt, &mut rng)
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    Ok(PathSample { initial: run(0), source: run(1) })
}

/// Mean and standard error of a 0/1 sample.
fn bernoulli(hits: usize, n: usize) -> (f64, f64) {
    let p = hits as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub species: Species,
    pub t: f64,
    /// Mass of the initial density absorbed by time `t`.
    pub initial_term: f64,
    /// `kappa t` times the absorption probability of source paths.
    pub source_term: f64,
    pub estimate: f64,
    pub target: f64,
    pub std_err: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalCheck {
    pub lo: f64,
    pub hi: f64,
    pub profile_mass: f64,
    pub estimate: f64,
    pub std_err: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub species: Species,
    pub t: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub identity: IdentityCheck,
    pub intervals: Vec<IntervalCheck>,
    pub max_abs_z: f64,
}

fn identity_from(sol: &FbpSolution, species: Species, t: f64, s: &PathSample) -> IdentityCheck {
    let mass = match species {
        Species::U => sol.minus[0].mass_u(),
        Species::V => sol.minus[0].mass_v(),
    };
    let (p1, e1) = bernoulli(s.initial.iter().filter(|x| x.is_none()).count(), s.initial.len());
    let (p2, e2) = bernoulli(s.source.iter().filter(|x| x.is_none()).count(), s.source.len());
    let kt = sol.kappa * t;
    let est = mass * p1 + kt * p2;
    let se = ((mass * e1).powi(2) + (kt * e2).powi(2)).sqrt();
    let target = kt;
    let z = if se > 0.0 { (est - target) / se } else if est == target { 0.0 } else { f64::INFINITY };
    IdentityCheck { species, t, initial_term: mass * p1, source_term: kt * p2, estimate: est, target, std_err: se, z }
}

/// Monte Carlo estimate of the absorbed mass identity for one species.
pub fn mass_identity_check(sol: &FbpSolution, species: Species, t: f64, mc: &McConfig) -> Result<IdentityCheck, FbpError> {
    let s = simulate(sol, species, t, mc)?;
    Ok(identity_from(sol, species, t, &s))
}

/// Ten equal intervals covering the bulk of one species' support at time `t`.
pub fn default_intervals(sol: &FbpSolution, species: Species, t: f64) -> Vec<(f64, f64)> {
    let k = sol.index_near(t);
    let mid = sol.midpoint(k);
    let (lo, hi) = match species {
        Species::U => {
            let tail = mid.tail_u();
            let front = sol.boundaries.u_front_at(sol.times[k]);
            (quantile(&tail, 0.01), front)
        }
        Species::V => {
            let tail = mid.tail_v();
            let front = sol.boundaries.v_front_at(sol.times[k]);
            (front, quantile(&tail, 0.99))
        }
    };
    let w = (hi - lo) / 10.0;
    (0..10).map(|i| (lo + i as f64 * w, lo + (i + 1) as f64 * w)).collect()
}

/// Point where the mass to the left is `q` times the total.
fn quantile(tail: &TailFn, q: f64) -> f64 {
    let target = (1.0 - q) * tail.total();
    let e = tail.edges();
    let (mut a, mut b) = (e[0], e[e.len() - 1]);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if tail.eval(m) > target {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Interval masses of the reference midpoint profile against the Monte Carlo
/// representation, plus the mass identity from the same paths.
pub fn mc_validate(
    sol: &FbpSolution,
    species: Species,
    t: f64,
    intervals: &[(f64, f64)],
    mc: &McConfig,
) -> Result<McReport, FbpError> {
    let s = simulate(sol, species, t, mc)?;
    let identity = identity_from(sol, species, t, &s);
    let k = sol.index_near(t);
    let mid = sol.midpoint(k);
    let tail = match species {
        Species::U => mid.tail_u(),
        Species::V => mid.tail_v(),
    };
    let mass = match species {
        Species::U => sol.minus[0].mass_u(),
        Species::V => sol.minus[0].mass_v(),
    };
    let kt = sol.kappa * t;
    let n1 = s.initial.len() as f64;
    let n2 = s.source.len() as f64;
    let intervals: Vec<IntervalCheck> = intervals
        .iter()
        .map(|&(lo, hi)| {
            let inside = |v: &Vec<Option<f64>>| v.iter().filter(|x| x.is_some_and(|y| y >= lo && y < hi)).count();
            let p1 = inside(&s.initial) as f64 / n1;
            let p2 = inside(&s.source) as f64 / n2;
            let est = mass * p1 + kt * p2;
            let se = ((mass * mass * p1 * (1.0 - p1) / n1) + (kt * kt * p2 * (1.0 - p2) / n2)).sqrt();
            let profile_mass = tail.eval(lo) - tail.eval(hi);
            let z = if se > 0.0 { (est - profile_mass) / se } else { 0.0 };
            IntervalCheck { lo, hi, profile_mass, estimate: est, std_err: se, z }
        })
        .collect();
    let max_abs_z = intervals.iter().map(|c| c.z.abs()).fold(identity.z.abs(), f64::max);
    Ok(McReport { species, t, n_paths: mc.n_paths, dt: mc.dt, identity, intervals, max_abs_z })
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability that a Brownian motion from `x` reaches the level `a > x` by time `t`.
pub fn reflection_hit_probability(x: f64, a: f64, t: f64) -> f64 {
    if x >= a {
        return 1.0;
    }
    2.0 * (1.0 - normal_cdf((a - x) / t.sqrt()))
}

/// Probability that a Brownian motion from `x < a` ends in `[lo, hi)` at time
/// `t` without having reached `a`.
pub fn reflection_survival_in(x: f64, a: f64, t: f64, lo: f64, hi: f64) -> f64 {
    let hi = hi.min(a);
    if lo >= hi {
        return 0.0;
    }
    let st = t.sqrt();
    let free = normal_cdf((hi - x) / st) - normal_cdf((lo - x) / st);
    let mirror = 2.0 * a - x;
    let image = normal_cdf((hi - mirror) / st) - normal_cdf((lo - mirror) / st);
    free - image
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub start: f64,
    pub level: f64,
    pub t: f64,
    pub label: String,
    pub exact: f64,
    pub estimate: f64,
    pub std_err: f64,
    pub z: f64,
}

/// Constant-level absorption against the reflection principle: hitting
/// probability and survival-in-interval probabilities.
pub fn constant_barrier_oracle(start: f64, level: f64, t: f64, mc: &McConfig) -> Vec<OracleCheck> {
    let barrier = ConstantBarrier { level, upper: true };
    let chunks = mc.n_paths.div_ceil(CHUNK);
    let ends: Vec<Option<f64>> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = substream(mc.seed, Stream::Oracle, c as u64);
            let n = CHUNK.min(mc.n_paths - c * CHUNK);
            (0..n).map(|_| absorbed_path(&barrier, start, 0.0, t, mc.dt, &mut rng)).collect::<Vec<_>>()
        })
        .collect();
    let n = ends.len();
    let mut out = Vec::new();
    let mut push = |label: String, exact: f64, hits: usize| {
        let (p, _) = bernoulli(hits, n);
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        let z = if se > 0.0 { (p - exact) / se } else { 0.0 };
        out.push(OracleCheck { start, level, t, label, exact, estimate: p, std_err: se, z });
    };
    push("hit".into(), reflection_hit_probability(start, level, t), ends.iter().filter(|e| e.is_none()).count());
    let sd = t.sqrt();
    for k in 0..4 {
        let lo = level - (k + 1) as f64 * 0.5 * sd;
        let hi = level - k as f64 * 0.5 * sd;
        let hits = ends.iter().filter(|e| e.is_some_and(|y| y >= lo && y < hi)).count();
        push(format!("survive in [{lo:.4}, {hi:.4})"), reflection_survival_in(start, level, t, lo, hi), hits);
    }
    out
}

/// One row of the particle-versus-continuum comparison at a single `epsilon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HydroRow {
    pub epsilon: f64,
    pub seeds: usize,
    pub particles: usize,
    /// Runs whose bookkeeping count left `(0, M)`; they are kept in the averages.
    pub chi_excluded: usize,
    /// Mean over seeds of the per-seed sup distance between the empirical
    /// `a` tail and the bracket midpoint.
    pub mean_sup_dev: f64,
    pub mean_sup_dev_se: f64,
    /// Sup distance between the seed-averaged `a` tail and the midpoint.
    pub sup_dev_of_mean: f64,
    /// Sup distance between the seed-averaged total tail and the heat solution.
    pub heat_dev: f64,
    /// Sites where the averaged `a` tail leaves `[minus - 2 se, plus + 2 se]`.
    pub band_violations: usize,
    pub band_sites: usize,
    /// Largest distance outside the bracket, in standard errors.
    pub worst_band_z: f64,
    pub worst_band_r: f64,
}

/// Mean and standard error of each column.
fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let w = rows[0].len();
    let mut mean = vec![0.0; w];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    let mut se = vec![0.0; w];
    if rows.len() > 1 {
        for r in rows {
            for ((s, x), m) in se.iter_mut().zip(r).zip(&mean) {
                *s += (x - m) * (x - m) / (n - 1.0);
            }
        }
    }
    (mean, se.into_iter().map(|v| (v / n).sqrt()).collect())
}

/// Run `seeds` replicas of the particle system at `cfg.epsilon` up to
/// `cfg.horizon_t` and compare them with the bracket stored in `sol` at that
/// time and with the heat flow of `u0 + v0`.
///
/// Standard errors at a site are floored at `epsilon / seeds`, the
/// resolution of one particle in one run, so that sites where every run
/// agrees are not judged with a zero-width band.
pub fn hydro_row(sol: &FbpSolution, cfg: &SimConfig, seeds: u64) -> Result<HydroRow, FbpError> {
    use crate::lattice::{simulate_replica, tail_mass};
    use crate::macroscopic::heat_evolve;

    if seeds == 0 {
        return Err(FbpError::Parameter("need at least one seed".into()));
    }
    let p0 = &sol.minus[0];
    let k = sol.index_near(cfg.horizon_t);
    let (minus, plus) = (sol.minus[k].tail_u(), sol.plus[k].tail_u());
    let (hg, hf) = heat_evolve(p0.grid(), &p0.sum(), cfg.horizon_t, 1)?;
    let heat = TailFn::new(&hg, &hf);

    let runs: Vec<(ParticleState, bool)> = (0..seeds)
        .into_par_iter()
        .map(|r| {
            let traj = simulate_replica(cfg, p0, r).map_err(|e| FbpError::Parameter(e.to_string()))?;
            let end = traj.end();
            let chi = traj.log().chi_status(traj.initial().count_a(), traj.initial().len(), end).in_chi;
            Ok((traj.state_at(end).map_err(|e| FbpError::Parameter(e.to_string()))?, chi))
        })
        .collect::<Result<_, FbpError>>()?;

    let eps = cfg.epsilon;
    let occ: Vec<_> = runs.iter().map(|(s, _)| crate::lattice::occupation(s)).collect();
    let lo = runs.iter().flat_map(|(s, _)| s.positions.iter()).min().copied().unwrap_or(0) - 1;
    let hi = runs.iter().flat_map(|(s, _)| s.positions.iter()).max().copied().unwrap_or(0) + 1;
    let sites: Vec<i64> = (lo..=hi).collect();
    let r_of = |x: i64| eps * (x as f64 - 0.5);

    let a_rows: Vec<Vec<f64>> = occ
        .iter()
        .map(|o| sites.iter().map(|&x| eps * tail_mass(&o.xi, x) as f64).collect())
        .collect();
    let tot_rows: Vec<Vec<f64>> = occ
        .iter()
        .map(|o| sites.iter().map(|&x| eps * (tail_mass(&o.xi, x) + tail_mass(&o.eta, x)) as f64).collect())
        .collect();
    let mid = |r: f64| 0.5 * (minus.eval(r) + plus.eval(r));

    let per_seed: Vec<f64> = a_rows
        .iter()
        .map(|row| sites.iter().zip(row).map(|(&x, f)| (f - mid(r_of(x))).abs()).fold(0.0, f64::max))
        .collect();
    let n = per_seed.len() as f64;
    let mean_sup_dev = per_seed.iter().sum::<f64>() / n;
    let var = if per_seed.len() > 1 {
        per_seed.iter().map(|d| (d - mean_sup_dev).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };

    let (a_mean, a_se) = column_stats(&a_rows);
    let (t_mean, _) = column_stats(&tot_rows);
    let floor = eps / n;
    let mut row = HydroRow {
        epsilon: eps,
        seeds: runs.len(),
        particles: runs[0].0.len(),
        chi_excluded: runs.iter().filter(|(_, c)| !c).count(),
        mean_sup_dev,
        mean_sup_dev_se: (var / n).sqrt(),
        sup_dev_of_mean: 0.0,
        heat_dev: 0.0,
        band_violations: 0,
        band_sites: sites.len(),
        worst_band_z: 0.0,
        worst_band_r: f64::NAN,
    };
    for (i, &x) in sites.iter().enumerate() {
        let r = r_of(x);
        row.sup_dev_of_mean = row.sup_dev_of_mean.max((a_mean[i] - mid(r)).abs());
        row.heat_dev = row.heat_dev.max((t_mean[i] - heat.eval(r)).abs());
        let (lo_b, hi_b) = (minus.eval(r).min(plus.eval(r)), minus.eval(r).max(plus.eval(r)));
        let se = a_se[i].max(floor);
        let out = (lo_b - a_mean[i]).max(a_mean[i] - hi_b).max(0.0) / se;
        if out > 2.0 {
            row.band_violations += 1;
        }
        if out > row.worst_band_z || row.worst_band_r.is_nan() {
            row.worst_band_z = out;
            row.worst_band_r = r;
        }
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::macroscopic::{l1_distance, tent};

    fn tents(h: f64) -> ProfilePair {
        let g = GridSpec::with_spacing(-3.0, 4.0, h).unwrap();
        ProfilePair::from_fns(g, tent(-1.0, 0.5, 1.0), tent(0.0, 1.5, 1.0)).unwrap()
    }

    #[test]
    fn kappa_zero_is_pure_heat() {
        let p = tents(0.01);
        let sol = solve_reference(&p, 0.0, 0.2, 0.01, 5).unwrap();
        assert!(sol.regime_exit.is_none());
        for (m, q) in sol.minus.iter().zip(&sol.plus) {
            assert!(l1_distance(m.grid(), m.u(), q.grid(), q.u()).unwrap() <= 1e-9);
        }
        assert!(sol.bracket_width.iter().all(|w| *w <= 1e-9));
        let (fu, fv) = flux_at_boundary(&sol, 0.2).unwrap();
        assert!(fu.abs() < 1e-3 && fv.abs() < 1e-3, "{fu} {fv}");
    }

    #[test]
    fn masses_and_bracket() {
        let p = tents(0.01);
        let sol = solve_reference(&p, 0.5, 0.3, 0.01, 10).unwrap();
        assert!(sol.mass_drift <= 1e-8);
        assert!(sol.bracket_excess.iter().all(|e| *e <= 1e-9));
        for q in sol.minus.iter().chain(&sol.plus) {
            assert!((q.mass_u() - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn initial_boundaries_match_supports() {
        let p = tents(0.005);
        let sol = solve_reference(&p, 0.5, 0.05, 0.005, 1).unwrap();
        let b = extract_boundaries(&sol).unwrap();
        assert!((b.u_edge[0] - 0.5).abs() <= 0.005);
        assert!((b.v_edge[0] - 0.0).abs() <= 0.005);
        assert!((b.u_front[0] - 0.5).abs() <= 1e-9);
    }

    #[test]
    fn symmetric_input_gives_mirrored_fronts() {
        // The tents are mirror images under r -> 0.5 - r.
        let p = tents(0.005);
        let sol = solve_reference(&p, 0.5, 0.1, 0.005, 4).unwrap();
        let b = extract_boundaries(&sol).unwrap();
        for (u, v) in b.u_edge.iter().zip(&b.v_edge) {
            assert!((u + v - 0.5).abs() <= 2.0 * 0.005, "{u} {v}");
        }
    }

    #[test]
    fn annihilation_is_flagged() {
        let g = GridSpec::with_spacing(-3.0, 4.0, 0.01).unwrap();
        let p = ProfilePair::from_fns(g, tent(-1.0, 0.5, 0.1), tent(0.0, 1.5, 0.1)).unwrap();
        let sol = solve_reference(&p, 1.0, 0.5, 0.01, 5).unwrap();
        assert!(sol.regime_exit.is_some());
        assert!(sol.end_time() < 0.5);
    }

    #[test]
    fn flux_rejects_initial_layer() {
        let sol = solve_reference(&tents(0.01), 0.5, 0.1, 0.01, 1).unwrap();
        assert!(matches!(flux_at_boundary(&sol, 0.02), Err(FbpError::OutOfRange { .. })));
    }

    #[test]
    fn reflection_formulas() {
        assert!((reflection_hit_probability(0.0, 1.0, 1.0) - 0.317_310_507_862_914_1).abs() < 1e-12);
        // Survival over the whole half-line is one minus the hitting probability.
        let s = reflection_survival_in(0.0, 1.0, 1.0, -50.0, 1.0);
        assert!((s - (1.0 - reflection_hit_probability(0.0, 1.0, 1.0))).abs() < 1e-12);
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn far_starts_are_not_absorbed() {
        let b = ConstantBarrier { level: 0.0, upper: true };
        let mut rng = substream(1, Stream::MonteCarlo, 0);
        let hits = (0..2000).filter(|_| absorbed_path(&b, -10.0, 0.0, 0.25, 1e-3, &mut rng).is_none()).count();
        assert_eq!(hits, 0);
        assert!(absorbed_path(&b, 0.5, 0.0, 0.25, 1e-3, &mut rng).is_none());
    }

    #[test]
    fn short_time_identity_is_small() {
        let sol = solve_reference(&tents(0.01), 0.5, 0.01, 0.001, 5).unwrap();
        let c = mass_identity_check(&sol, Species::U, 1e-3, &McConfig { n_paths: 20_000, dt: 1e-4, seed: 3 }).unwrap();
        assert!(c.estimate < 5e-3, "{c:?}");
        assert!(c.z.abs() <= 4.0, "{c:?}");
    }
}
