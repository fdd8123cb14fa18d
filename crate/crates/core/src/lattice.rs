//! Microscopic two-species system on `Z`.
//!
//! Labels are the indices `0..M` of the position/color vectors and never
//! change. Positions follow independent continuous-time walks of total rate
//! `walk_rate` (each jump is `+1` or `-1` with probability one half). Colors
//! change only at the rings of a marked Poisson clock: a `Right` mark turns the
//! rightmost `a` into a `b`, a `Left` mark turns the leftmost `b` into an `a`.

use std::collections::BTreeMap;
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::macroscopic::{validate_class_u, GridSpec, ProfilePair};
use crate::rng::{stream, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("initial profile is not admissible: {0}")]
    NotClassU(String),
    #[error("the profile yields no particles at this epsilon")]
    NoParticles,
    #[error("invalid particle state: {0}")]
    State(String),
    #[error("time runs backwards: {from} -> {to}")]
    BackwardTime { from: f64, to: f64 },
    #[error("event log is not strictly increasing at index {0}")]
    UnorderedLog(usize),
    #[error("walk realization covers [{start}, {end}], requested {requested}")]
    OutOfRange { start: f64, end: f64, requested: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    A,
    B,
}

impl Color {
    pub fn flipped(self) -> Color {
        match self {
            Color::A => Color::B,
            Color::B => Color::A,
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::A => "a",
            Color::B => "b",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mark {
    Right,
    Left,
}

impl fmt::Display for Mark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mark::Right => "right",
            Mark::Left => "left",
        })
    }
}

fn default_walk_rate() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub epsilon: f64,
    pub kappa: f64,
    pub horizon_t: f64,
    pub seed: u64,
    #[serde(default = "default_walk_rate")]
    pub walk_rate: f64,
}

impl SimConfig {
    pub fn new(epsilon: f64, kappa: f64, horizon_t: f64, seed: u64) -> Self {
        Self { epsilon, kappa, horizon_t, seed, walk_rate: 1.0 }
    }

    /// `kappa = 0` is accepted: it switches the exchange off and is the
    /// natural null case of every comparison.
    pub fn validate(&self) -> Result<(), LatticeError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(LatticeError::Config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(LatticeError::Config(format!("kappa must be finite and nonnegative, got {}", self.kappa)));
        }
        if !(self.horizon_t > 0.0) || !self.horizon_t.is_finite() {
            return Err(LatticeError::Config(format!("horizon_t must be positive, got {}", self.horizon_t)));
        }
        if !(self.walk_rate > 0.0) || !self.walk_rate.is_finite() {
            return Err(LatticeError::Config(format!("walk_rate must be positive, got {}", self.walk_rate)));
        }
        Ok(())
    }

    pub fn micro_horizon(&self) -> f64 {
        self.horizon_t / (self.epsilon * self.epsilon)
    }

    pub fn clock_intensity(&self) -> f64 {
        2.0 * self.epsilon * self.kappa
    }

    /// Microscopic time of macroscopic time `t`.
    pub fn micro_time(&self, t: f64) -> f64 {
        t / (self.epsilon * self.epsilon)
    }
}

/// `floor(total_mass / epsilon)`, guarded against a product like `2/0.1`
/// landing an ulp below an integer.
pub fn particle_count(total_mass: f64, epsilon: f64) -> usize {
    let x = total_mass / epsilon;
    (x * (1.0 + 1e-12)).floor().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub positions: Vec<i64>,
    pub colors: Vec<Color>,
    pub time: f64,
}

impl ParticleState {
    pub fn new(positions: Vec<i64>, colors: Vec<Color>, time: f64) -> Result<Self, LatticeError> {
        if positions.len() != colors.len() {
            return Err(LatticeError::State(format!(
                "{} positions but {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if positions.is_empty() {
            return Err(LatticeError::State("at least one particle is required".into()));
        }
        if !(time >= 0.0) {
            return Err(LatticeError::State(format!("time must be nonnegative, got {time}")));
        }
        Ok(Self { positions, colors, time })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn count_a(&self) -> usize {
        self.colors.iter().filter(|c| **c == Color::A).count()
    }
}

/// The marked Poisson clock.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    times: Vec<f64>,
    marks: Vec<Mark>,
}

impl EventLog {
    pub fn new(times: Vec<f64>, marks: Vec<Mark>) -> Result<Self, LatticeError> {
        if times.len() != marks.len() {
            return Err(LatticeError::State(format!("{} times but {} marks", times.len(), marks.len())));
        }
        if let Some(&t) = times.first() {
            if !(t > 0.0) {
                return Err(LatticeError::UnorderedLog(0));
            }
        }
        if let Some(k) = times.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(LatticeError::UnorderedLog(k + 1));
        }
        Ok(Self { times, marks })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn marks(&self) -> &[Mark] {
        &self.marks
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Index range of the rings in `(t0, t1]`.
    pub fn range(&self, t0: f64, t1: f64) -> std::ops::Range<usize> {
        let lo = self.times.partition_point(|&s| s <= t0);
        let hi = self.times.partition_point(|&s| s <= t1);
        lo..hi.max(lo)
    }

    /// Marks of the rings in `(t0, t1]`, in clock order.
    pub fn marks_in(&self, t0: f64, t1: f64) -> &[Mark] {
        &self.marks[self.range(t0, t1)]
    }

    /// Number of `a` particles at time `t` by bookkeeping alone:
    /// initial count plus left rings minus right rings in `(0, t]`.
    pub fn a_count(&self, h_a0: usize, t: f64) -> i64 {
        let r = self.range(0.0, t);
        self.marks[r].iter().fold(h_a0 as i64, |n, m| match m {
            Mark::Right => n - 1,
            Mark::Left => n + 1,
        })
    }

    /// Whether both species are present at every time in `[0, t_end]`
    /// according to the bookkeeping count.
    pub fn chi_status(&self, h_a0: usize, m: usize, t_end: f64) -> ChiStatus {
        let m = m as i64;
        let mut n = h_a0 as i64;
        if !(0 < n && n < m) {
            return ChiStatus { in_chi: false, first_exit: Some(0.0) };
        }
        for k in self.range(0.0, t_end) {
            n += match self.marks[k] {
                Mark::Right => -1,
                Mark::Left => 1,
            };
            if !(0 < n && n < m) {
                return ChiStatus { in_chi: false, first_exit: Some(self.times[k]) };
            }
        }
        ChiStatus { in_chi: true, first_exit: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiStatus {
    pub in_chi: bool,
    /// First time at which one species is (or would be) exhausted.
    pub first_exit: Option<f64>,
}

/// Rings of intensity `rate` on `(0, horizon]` with fair marks.
pub fn sample_marked_poisson<R: Rng + ?Sized>(rate: f64, horizon: f64, rng: &mut R) -> EventLog {
    let mut times = Vec::new();
    let mut marks = Vec::new();
    if rate > 0.0 {
        let exp = Exp::new(rate).expect("positive rate");
        let mut t = 0.0;
        loop {
            t += exp.sample(rng);
            if t > horizon {
                break;
            }
            times.push(t);
            marks.push(if rng.random_bool(0.5) { Mark::Right } else { Mark::Left });
        }
    }
    EventLog { times, marks }
}

/// Clock of intensity `2 epsilon kappa` on `(0, epsilon^-2 T]`.
pub fn sample_clock<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> EventLog {
    sample_marked_poisson(cfg.clock_intensity(), cfg.micro_horizon(), rng)
}

/// Sites `x` with `epsilon * x` on the grid and positive total density, with their weights.
fn site_weights(profile: &ProfilePair, epsilon: f64) -> (Vec<i64>, Vec<f64>) {
    let g = profile.grid();
    let lo = (g.r_min / epsilon).ceil() as i64;
    let hi = (g.r_max() / epsilon).floor() as i64;
    let mut sites = Vec::new();
    let mut weights = Vec::new();
    for x in lo..=hi {
        let (u, v) = profile.eval(epsilon * x as f64);
        if u + v > 0.0 {
            sites.push(x);
            weights.push(u + v);
        }
    }
    (sites, weights)
}

/// `M = floor(total_mass / epsilon)` i.i.d. positions with weight `u + v` at
/// `epsilon * x`, each colored `a` with probability `u / (u + v)` there.
pub fn sample_initial<R: Rng + ?Sized>(
    profile: &ProfilePair,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<ParticleState, LatticeError> {
    cfg.validate()?;
    let report = validate_class_u(profile);
    if !report.valid {
        return Err(LatticeError::NotClassU(report.violations.join("; ")));
    }
    let m = particle_count(profile.total_mass(), cfg.epsilon);
    if m == 0 {
        return Err(LatticeError::NoParticles);
    }
    let (sites, weights) = site_weights(profile, cfg.epsilon);
    let dist = WeightedIndex::new(&weights).map_err(|_| LatticeError::NoParticles)?;
    let mut positions = Vec::with_capacity(m);
    let mut colors = Vec::with_capacity(m);
    for _ in 0..m {
        let k = dist.sample(rng);
        let x = sites[k];
        let (u, v) = profile.eval(cfg.epsilon * x as f64);
        positions.push(x);
        colors.push(if rng.random_bool((u / (u + v)).clamp(0.0, 1.0)) { Color::A } else { Color::B });
    }
    ParticleState::new(positions, colors, 0.0)
}

/// One walk step of one particle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub label: u32,
    pub step: i8,
}

/// A stored realization of all walks on `[start, end]`, shared by the true
/// and auxiliary evolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkRealization {
    start: f64,
    end: f64,
    initial: Vec<i64>,
    jumps: Vec<Jump>,
}

impl WalkRealization {
    /// Superposition of `M` independent walks: jumps arrive at rate
    /// `M * walk_rate` and each one moves a uniformly chosen particle.
    pub fn sample<R: Rng + ?Sized>(
        initial: &[i64],
        start: f64,
        end: f64,
        walk_rate: f64,
        rng: &mut R,
    ) -> Result<Self, LatticeError> {
        if end < start {
            return Err(LatticeError::BackwardTime { from: start, to: end });
        }
        if !(walk_rate > 0.0) {
            return Err(LatticeError::Config(format!("walk_rate must be positive, got {walk_rate}")));
        }
        let m = initial.len();
        let mut jumps = Vec::new();
        if m > 0 {
            let exp = Exp::new(m as f64 * walk_rate).expect("positive rate");
            let mut t = start;
            loop {
                t += exp.sample(rng);
                if t > end {
                    break;
                }
                let label = rng.random_range(0..m) as u32;
                let step = if rng.random_bool(0.5) { 1 } else { -1 };
                jumps.push(Jump { time: t, label, step });
            }
        }
        Ok(Self { start, end, initial: initial.to_vec(), jumps })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn initial(&self) -> &[i64] {
        &self.initial
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    pub fn positions_at(&self, t: f64) -> Result<Vec<i64>, LatticeError> {
        let mut c = self.cursor();
        c.advance_to(t)?;
        Ok(c.positions)
    }

    pub fn cursor(&self) -> PositionCursor<'_> {
        PositionCursor { walks: self, positions: self.initial.clone(), next: 0, time: self.start }
    }

    fn check_range(&self, t: f64) -> Result<(), LatticeError> {
        if t < self.start || t > self.end {
            return Err(LatticeError::OutOfRange { start: self.start, end: self.end, requested: t });
        }
        Ok(())
    }
}

/// Forward-only reader of a [`WalkRealization`].
#[derive(Clone, Debug)]
pub struct PositionCursor<'a> {
    walks: &'a WalkRealization,
    pub positions: Vec<i64>,
    next: usize,
    time: f64,
}

impl PositionCursor<'_> {
    pub fn time(&self) -> f64 {
        self.time
    }

    /// Time of the next jump, if any.
    pub fn peek(&self) -> Option<&Jump> {
        self.walks.jumps.get(self.next)
    }

    /// Apply the next jump and return it.
    pub fn step(&mut self) -> Option<Jump> {
        let j = *self.walks.jumps.get(self.next)?;
        self.positions[j.label as usize] += j.step as i64;
        self.next += 1;
        self.time = j.time;
        Some(j)
    }

    /// Apply every jump at times `<= t`.
    pub fn advance_to(&mut self, t: f64) -> Result<(), LatticeError> {
        if t < self.time {
            return Err(LatticeError::BackwardTime { from: self.time, to: t });
        }
        self.walks.check_range(t)?;
        while self.peek().is_some_and(|j| j.time <= t) {
            self.step();
        }
        self.time = t;
        Ok(())
    }
}

/// Transport positions from `ps.time` to `t1` with colors frozen.
pub fn evolve_positions<R: Rng + ?Sized>(
    ps: &ParticleState,
    t1: f64,
    walk_rate: f64,
    rng: &mut R,
) -> Result<ParticleState, LatticeError> {
    let w = WalkRealization::sample(&ps.positions, ps.time, t1, walk_rate, rng)?;
    Ok(ParticleState { positions: w.positions_at(t1)?, colors: ps.colors.clone(), time: t1 })
}

/// Rightmost `a`, ties broken toward the largest label.
pub fn rightmost_a(positions: &[i64], colors: &[Color]) -> Option<usize> {
    (0..positions.len()).filter(|&i| colors[i] == Color::A).max_by_key(|&i| (positions[i], i))
}

/// Leftmost `b`, ties broken toward the largest label.
pub fn leftmost_b(positions: &[i64], colors: &[Color]) -> Option<usize> {
    (0..positions.len())
        .filter(|&i| colors[i] == Color::B)
        .max_by_key(|&i| (std::cmp::Reverse(positions[i]), i))
}

/// Label flipped by `mark`, if the relevant species is present.
pub fn target(positions: &[i64], colors: &[Color], mark: Mark) -> Option<usize> {
    match mark {
        Mark::Right => rightmost_a(positions, colors),
        Mark::Left => leftmost_b(positions, colors),
    }
}

/// Apply one flip in place; returns the flipped label.
pub fn flip(positions: &[i64], colors: &mut [Color], mark: Mark) -> Option<usize> {
    let i = target(positions, colors, mark)?;
    colors[i] = colors[i].flipped();
    Some(i)
}

pub fn apply_h(ps: &ParticleState, mark: Mark) -> ParticleState {
    let mut out = ps.clone();
    flip(&out.positions, &mut out.colors, mark);
    out
}

/// The true evolution: one walk realization and one clock.
#[derive(Clone, Debug)]
pub struct Trajectory {
    initial: ParticleState,
    walks: WalkRealization,
    log: EventLog,
}

impl Trajectory {
    pub fn new(initial: ParticleState, walks: WalkRealization, log: EventLog) -> Result<Self, LatticeError> {
        if walks.initial() != initial.positions.as_slice() || walks.start() != initial.time {
            return Err(LatticeError::State("walk realization does not start from the initial state".into()));
        }
        Ok(Self { initial, walks, log })
    }

    pub fn initial(&self) -> &ParticleState {
        &self.initial
    }

    pub fn walks(&self) -> &WalkRealization {
        &self.walks
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn end(&self) -> f64 {
        self.walks.end()
    }

    pub fn cursor(&self) -> TrueCursor<'_> {
        TrueCursor {
            positions: self.walks.cursor(),
            colors: self.initial.colors.clone(),
            log: &self.log,
            next_ring: self.log.range(0.0, self.initial.time).end,
            no_ops: 0,
        }
    }

    /// State at `t`; a ring at exactly `t` has already acted.
    pub fn state_at(&self, t: f64) -> Result<ParticleState, LatticeError> {
        let mut c = self.cursor();
        c.advance_to(t)?;
        Ok(c.state())
    }

    /// States at non-decreasing query times, in one pass.
    pub fn states_at(&self, times: &[f64]) -> Result<Vec<ParticleState>, LatticeError> {
        let mut c = self.cursor();
        times
            .iter()
            .map(|&t| {
                c.advance_to(t)?;
                Ok(c.state())
            })
            .collect()
    }

    /// Number of rings in `(0, t]` that found the targeted species absent.
    pub fn no_op_flips(&self, t: f64) -> Result<usize, LatticeError> {
        let mut c = self.cursor();
        c.advance_to(t)?;
        Ok(c.no_ops)
    }
}

/// Forward-only reader of a [`Trajectory`].
#[derive(Clone, Debug)]
pub struct TrueCursor<'a> {
    positions: PositionCursor<'a>,
    colors: Vec<Color>,
    log: &'a EventLog,
    next_ring: usize,
    no_ops: usize,
}

impl TrueCursor<'_> {
    pub fn advance_to(&mut self, t: f64) -> Result<(), LatticeError> {
        if t < self.positions.time() {
            return Err(LatticeError::BackwardTime { from: self.positions.time(), to: t });
        }
        self.positions.walks.check_range(t)?;
        loop {
            let ring = self.log.times.get(self.next_ring).copied().filter(|&s| s <= t);
            let jump = self.positions.peek().map(|j| j.time).filter(|&s| s <= t);
            match (ring, jump) {
                (Some(s), Some(j)) if j < s => {
                    self.positions.step();
                }
                (Some(_), _) => {
                    let mark = self.log.marks[self.next_ring];
                    if flip(&self.positions.positions, &mut self.colors, mark).is_none() {
                        self.no_ops += 1;
                    }
                    self.next_ring += 1;
                }
                (None, Some(_)) => {
                    self.positions.step();
                }
                (None, None) => break,
            }
        }
        self.positions.advance_to(t)
    }

    pub fn state(&self) -> ParticleState {
        ParticleState {
            positions: self.positions.positions.clone(),
            colors: self.colors.clone(),
            time: self.positions.time(),
        }
    }
}

/// Sample the walks on `[ps.time, t_end]` and bundle them with `log`.
pub fn run_true<R: Rng + ?Sized>(
    ps: &ParticleState,
    log: &EventLog,
    t_end: f64,
    walk_rate: f64,
    rng: &mut R,
) -> Result<Trajectory, LatticeError> {
    let walks = WalkRealization::sample(&ps.positions, ps.time, t_end, walk_rate, rng)?;
    Trajectory::new(ps.clone(), walks, log.clone())
}

/// Replica `replica` of `cfg` on `[0, micro_horizon]`: initial state, clock
/// and walks each from their own stream of `cfg.seed ^ replica`.
pub fn simulate_replica(cfg: &SimConfig, profile: &ProfilePair, replica: u64) -> Result<Trajectory, LatticeError> {
    let seed = crate::rng::replica_seed(cfg.seed, replica);
    let ps = sample_initial(profile, cfg, &mut stream(seed, Stream::Initial))?;
    let end = cfg.micro_horizon();
    let log = sample_marked_poisson(cfg.clock_intensity(), end, &mut stream(seed, Stream::Clock));
    run_true(&ps, &log, end, cfg.walk_rate, &mut stream(seed, Stream::Walks))
}

/// Finitely supported site counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCounts(pub BTreeMap<i64, u64>);

impl SiteCounts {
    pub fn get(&self, x: i64) -> u64 {
        self.0.get(&x).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn add(&mut self, x: i64, n: u64) {
        if n > 0 {
            *self.0.entry(x).or_insert(0) += n;
        }
    }

    pub fn sites(&self) -> impl Iterator<Item = i64> + '_ {
        self.0.keys().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupationPair {
    pub xi: SiteCounts,
    pub eta: SiteCounts,
}

pub fn occupation(ps: &ParticleState) -> OccupationPair {
    let mut xi = SiteCounts::default();
    let mut eta = SiteCounts::default();
    for (&x, &c) in ps.positions.iter().zip(&ps.colors) {
        match c {
            Color::A => xi.add(x, 1),
            Color::B => eta.add(x, 1),
        }
    }
    OccupationPair { xi, eta }
}

/// `sum_{y >= x} counts(y)`.
pub fn tail_mass(counts: &SiteCounts, x: i64) -> u64 {
    counts.0.range(x..).map(|(_, n)| n).sum()
}

/// Epsilon-scaled empirical densities on `grid`, one node per particle
/// position (nearest node). The grid is extended by whole cells when
/// particles fall outside it; the flag reports that.
pub fn empirical_profile(ps: &ParticleState, epsilon: f64, grid: &GridSpec) -> (ProfilePair, bool) {
    let idx = |x: i64| ((epsilon * x as f64 - grid.r_min) / grid.h).round() as i64;
    let lo = ps.positions.iter().map(|&x| idx(x)).min().unwrap_or(0);
    let hi = ps.positions.iter().map(|&x| idx(x)).max().unwrap_or(0);
    let left = (-lo).max(0) as usize;
    let right = (hi - grid.n_cells as i64).max(0) as usize;
    let g = grid.extended(left, right);
    let mut u = vec![0.0; g.n_nodes()];
    let mut v = vec![0.0; g.n_nodes()];
    for (&x, &c) in ps.positions.iter().zip(&ps.colors) {
        let i = (idx(x) + left as i64) as usize;
        let add = epsilon / g.weight(i);
        match c {
            Color::A => u[i] += add,
            Color::B => v[i] += add,
        }
    }
    let p = ProfilePair::new(g, u, v).expect("counts are finite and nonnegative");
    (p, left + right > 0)
}

/// Largest gap between a mean epsilon-scaled empirical tail and a
/// continuous tail `f`. The empirical tail at site `x` counts particles at
/// `y >= x`, i.e. the mass to the right of `epsilon * (x - 1/2)`.
pub fn sup_tail_deviation(samples: &[SiteCounts], epsilon: f64, f: impl Fn(f64) -> f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let lo = samples.iter().filter_map(|s| s.sites().next()).min().unwrap_or(0);
    let hi = samples.iter().filter_map(|s| s.sites().last()).max().unwrap_or(0);
    let n = samples.len() as f64;
    let mut worst: f64 = 0.0;
    for x in lo - 1..=hi + 1 {
        let mean = samples.iter().map(|s| tail_mass(s, x) as f64).sum::<f64>() * epsilon / n;
        worst = worst.max((mean - f(epsilon * (x as f64 - 0.5))).abs());
    }
    worst
}
