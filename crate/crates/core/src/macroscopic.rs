//! Deterministic macroscopic machinery on a uniform grid.
//!
//! A sampled function `f` on a [`GridSpec`] is read as a piecewise-constant
//! density: node `i` carries the trapezoid mass `w_i * f_i` spread uniformly
//! over its dual cell `[r_i - h/2, r_i + h/2]` (clipped to the grid). Under
//! this reading
//!
//! * the total mass is exactly the trapezoid integral,
//! * the tail `F(r) = int_r^inf f` is piecewise linear with kinks at dual-cell
//!   edges and agrees with the trapezoid tail at every node,
//! * cutting a profile at a point inside a cell is an exact mass split,
//!
//! so the cut operator and the Gaussian step conserve mass to rounding and the
//! tail order can be decided exactly by looking at the kinks.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Variant;

/// Relative threshold used to decide whether a node belongs to a support.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;
/// Truncation radius of the Gaussian kernel, in standard deviations.
pub const KERNEL_RADIUS_SIGMAS: f64 = 8.0;
/// Outer nodes below this fraction of the peak are trimmed after each barrier step.
pub const TRIM_THRESHOLD: f64 = 1e-30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MacroError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("grids are not node-aligned (spacings {0} and {1})")]
    NotAligned(f64, f64),
    #[error("cut mass {requested} is not below the available mass {available}")]
    CutTooLarge { requested: f64, available: f64 },
    #[error("convolution time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("repair mass {m} must be below m0 = {m0}")]
    RepairMassTooLarge { m: f64, m0: f64 },
    #[error("repair cut points out of order: {lower} >= {upper}")]
    RepairGeometry { lower: f64, upper: f64 },
}

/// Uniform grid with nodes `r_min + i*h`, `i = 0..=n_cells`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub r_min: f64,
    pub h: f64,
    pub n_cells: usize,
}

impl GridSpec {
    pub fn new(r_min: f64, r_max: f64, n_cells: usize) -> Result<Self, MacroError> {
        if !(r_min < r_max) || !r_min.is_finite() || !r_max.is_finite() {
            return Err(MacroError::Grid(format!("need r_min < r_max, got [{r_min}, {r_max}]")));
        }
        if n_cells == 0 {
            return Err(MacroError::Grid("n_cells must be positive".into()));
        }
        Ok(Self { r_min, h: (r_max - r_min) / n_cells as f64, n_cells })
    }

    /// Grid covering `[r_min, r_max]` with spacing as close to `h` as an integer cell count allows.
    pub fn with_spacing(r_min: f64, r_max: f64, h: f64) -> Result<Self, MacroError> {
        if !(h > 0.0) {
            return Err(MacroError::Grid(format!("cell width must be positive, got {h}")));
        }
        let n = ((r_max - r_min) / h).round().max(1.0) as usize;
        Self::new(r_min, r_max, n)
    }

    pub fn r_max(&self) -> f64 {
        self.r_min + self.n_cells as f64 * self.h
    }

    pub fn n_nodes(&self) -> usize {
        self.n_cells + 1
    }

    pub fn node(&self, i: usize) -> f64 {
        self.r_min + i as f64 * self.h
    }

    /// Trapezoid weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i == self.n_cells {
            0.5 * self.h
        } else {
            self.h
        }
    }

    /// Dual cell of node `i`, clipped to the grid.
    pub fn dual_cell(&self, i: usize) -> (f64, f64) {
        let r = self.node(i);
        let lo = if i == 0 { r } else { r - 0.5 * self.h };
        let hi = if i == self.n_cells { r } else { r + 0.5 * self.h };
        (lo, hi)
    }

    /// Integer node offset of `other.r_min` relative to `self.r_min`, when the
    /// two grids share spacing and node lattice.
    pub fn offset_of(&self, other: &GridSpec) -> Result<isize, MacroError> {
        if (self.h - other.h).abs() > 1e-12 * self.h {
            return Err(MacroError::NotAligned(self.h, other.h));
        }
        let shift = (other.r_min - self.r_min) / self.h;
        let k = shift.round();
        if (shift - k).abs() > 1e-6 {
            return Err(MacroError::NotAligned(self.h, other.h));
        }
        Ok(k as isize)
    }

    /// Same lattice with `left` cells prepended and `right` cells appended.
    pub fn extended(&self, left: usize, right: usize) -> GridSpec {
        GridSpec {
            r_min: self.r_min - left as f64 * self.h,
            h: self.h,
            n_cells: self.n_cells + left + right,
        }
    }

    /// Smallest aligned grid containing both.
    pub fn union(&self, other: &GridSpec) -> Result<GridSpec, MacroError> {
        let off = self.offset_of(other)?;
        let lo = off.min(0);
        let hi = (self.n_cells as isize).max(off + other.n_cells as isize);
        Ok(GridSpec {
            r_min: self.r_min + lo as f64 * self.h,
            h: self.h,
            n_cells: (hi - lo) as usize,
        })
    }

    /// Copy of `f` (sampled on `from`) placed on `self`, zero outside `from`.
    pub fn embed(&self, from: &GridSpec, f: &[f64]) -> Result<Vec<f64>, MacroError> {
        let off = self.offset_of(from)?;
        let mut out = vec![0.0; self.n_nodes()];
        for (i, &x) in f.iter().enumerate() {
            let j = off + i as isize;
            if j < 0 || j as usize >= out.len() {
                if x != 0.0 {
                    return Err(MacroError::Grid("embedding target does not cover the source".into()));
                }
                continue;
            }
            out[j as usize] = x;
        }
        // An end node of `from` may become interior on `self`; keep its mass.
        if off > 0 {
            out[off as usize] *= from.weight(0) / self.weight(off as usize);
        }
        let last = off + from.n_cells as isize;
        if (last as usize) < self.n_cells {
            out[last as usize] *= from.weight(from.n_cells) / self.weight(last as usize);
        }
        Ok(out)
    }
}

/// Trapezoid mass of a sampled function.
pub fn mass(grid: &GridSpec, f: &[f64]) -> f64 {
    f.iter().enumerate().map(|(i, &x)| grid.weight(i) * x).sum()
}

/// `int_r^inf f`.
pub fn tail_integral(grid: &GridSpec, f: &[f64], r: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &x) in f.iter().enumerate() {
        let (lo, hi) = grid.dual_cell(i);
        if hi <= r {
            continue;
        }
        acc += x * (hi - lo.max(r));
    }
    acc
}

/// `int_{-inf}^r f`.
pub fn head_integral(grid: &GridSpec, f: &[f64], r: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &x) in f.iter().enumerate() {
        let (lo, hi) = grid.dual_cell(i);
        if lo >= r {
            continue;
        }
        acc += x * (hi.min(r) - lo);
    }
    acc
}

/// Tail function of a sampled density, evaluable anywhere in `O(log n)`.
#[derive(Clone, Debug)]
pub struct TailFn {
    /// Kink abscissae, increasing: grid start, interior dual edges, grid end.
    edges: Vec<f64>,
    /// Tail value at each kink.
    tails: Vec<f64>,
}

impl TailFn {
    pub fn new(grid: &GridSpec, f: &[f64]) -> Self {
        let n = grid.n_nodes();
        let mut edges = Vec::with_capacity(n + 1);
        edges.push(grid.r_min);
        for i in 0..grid.n_cells {
            edges.push(grid.node(i) + 0.5 * grid.h);
        }
        edges.push(grid.r_max());
        let mut tails = vec![0.0; n + 1];
        for i in (0..n).rev() {
            tails[i] = tails[i + 1] + grid.weight(i) * f[i];
        }
        Self { edges, tails }
    }

    pub fn total(&self) -> f64 {
        self.tails[0]
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn eval(&self, r: f64) -> f64 {
        if r <= self.edges[0] {
            return self.tails[0];
        }
        let last = self.edges.len() - 1;
        if r >= self.edges[last] {
            return 0.0;
        }
        let k = self.edges.partition_point(|&e| e <= r) - 1;
        let (a, b) = (self.edges[k], self.edges[k + 1]);
        let s = (r - a) / (b - a);
        self.tails[k] + s * (self.tails[k + 1] - self.tails[k])
    }
}

/// Result of removing a fixed mass from one end of a density.
#[derive(Clone, Debug)]
pub struct Split {
    pub kept: Vec<f64>,
    pub moved: Vec<f64>,
    /// Point separating kept from moved mass.
    pub cut: f64,
}

/// Remove mass `amount` from the right end of `f`.
pub fn split_right(grid: &GridSpec, f: &[f64], amount: f64) -> Result<Split, MacroError> {
    split_end(grid, f, amount, true)
}

/// Remove mass `amount` from the left end of `f`.
pub fn split_left(grid: &GridSpec, f: &[f64], amount: f64) -> Result<Split, MacroError> {
    split_end(grid, f, amount, false)
}

fn split_end(grid: &GridSpec, f: &[f64], amount: f64, from_right: bool) -> Result<Split, MacroError> {
    let total = mass(grid, f);
    if !(amount >= 0.0) || amount >= total {
        return Err(MacroError::CutTooLarge { requested: amount, available: total });
    }
    let n = f.len();
    let mut kept = f.to_vec();
    let mut moved = vec![0.0; n];
    let edge = if from_right { grid.r_max() } else { grid.r_min };
    if amount == 0.0 {
        return Ok(Split { kept, moved, cut: edge });
    }
    let order: Box<dyn Iterator<Item = usize>> =
        if from_right { Box::new((0..n).rev()) } else { Box::new(0..n) };
    let mut acc = 0.0;
    for i in order {
        let m = grid.weight(i) * f[i];
        if acc + m >= amount && m > 0.0 {
            let theta = ((amount - acc) / m).clamp(0.0, 1.0);
            moved[i] = theta * f[i];
            kept[i] = f[i] - moved[i];
            let (lo, hi) = grid.dual_cell(i);
            let cut = if from_right { hi - theta * (hi - lo) } else { lo + theta * (hi - lo) };
            return Ok(Split { kept, moved, cut });
        }
        acc += m;
        moved[i] = f[i];
        kept[i] = 0.0;
    }
    // Only reachable through rounding when `amount` is within an ulp of the total.
    Err(MacroError::CutTooLarge { requested: amount, available: total })
}

/// Gridded pair of densities `(u, v)` with cached masses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilePair {
    grid: GridSpec,
    u: Vec<f64>,
    v: Vec<f64>,
    mass_u: f64,
    mass_v: f64,
}

impl ProfilePair {
    pub fn new(grid: GridSpec, u: Vec<f64>, v: Vec<f64>) -> Result<Self, MacroError> {
        let n = grid.n_nodes();
        if u.len() != n || v.len() != n {
            return Err(MacroError::Profile(format!(
                "expected {n} samples per species, got {} and {}",
                u.len(),
                v.len()
            )));
        }
        if let Some(x) = u.iter().chain(&v).find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(MacroError::Profile(format!("samples must be finite and nonnegative, found {x}")));
        }
        let mass_u = mass(&grid, &u);
        let mass_v = mass(&grid, &v);
        Ok(Self { grid, u, v, mass_u, mass_v })
    }

    /// Sample two functions at the grid nodes.
    pub fn from_fns(grid: GridSpec, fu: impl Fn(f64) -> f64, fv: impl Fn(f64) -> f64) -> Result<Self, MacroError> {
        let u = (0..grid.n_nodes()).map(|i| fu(grid.node(i))).collect();
        let v = (0..grid.n_nodes()).map(|i| fv(grid.node(i))).collect();
        Self::new(grid, u, v)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn u(&self) -> &[f64] {
        &self.u
    }
    pub fn v(&self) -> &[f64] {
        &self.v
    }
    pub fn mass_u(&self) -> f64 {
        self.mass_u
    }
    pub fn mass_v(&self) -> f64 {
        self.mass_v
    }
    pub fn total_mass(&self) -> f64 {
        self.mass_u + self.mass_v
    }

    /// `u + v` at every node.
    pub fn sum(&self) -> Vec<f64> {
        self.u.iter().zip(&self.v).map(|(a, b)| a + b).collect()
    }

    /// Linear interpolation of the node samples; zero outside the grid.
    pub fn eval(&self, r: f64) -> (f64, f64) {
        (interp(&self.grid, &self.u, r), interp(&self.grid, &self.v, r))
    }

    pub fn tail_u(&self) -> TailFn {
        TailFn::new(&self.grid, &self.u)
    }

    pub fn tail_v(&self) -> TailFn {
        TailFn::new(&self.grid, &self.v)
    }

    /// Same profile on a larger aligned grid.
    pub fn embedded(&self, grid: &GridSpec) -> Result<Self, MacroError> {
        let u = grid.embed(&self.grid, &self.u)?;
        let v = grid.embed(&self.grid, &self.v)?;
        Self::new(*grid, u, v)
    }

    /// Drop outer nodes where `u + v` is below `rel` times its peak. The new
    /// end nodes are zeroed so the end weights never rescale live mass.
    pub fn trimmed(&self, rel: f64) -> Self {
        let s = self.sum();
        let peak = s.iter().cloned().fold(0.0, f64::max);
        let thr = rel * peak;
        let first = s.iter().position(|&x| x > thr);
        let last = s.iter().rposition(|&x| x > thr);
        let (Some(first), Some(last)) = (first, last) else {
            return self.clone();
        };
        let lo = first.saturating_sub(1);
        let hi = (last + 1).min(self.grid.n_cells);
        if lo == 0 && hi == self.grid.n_cells {
            return self.clone();
        }
        let grid = GridSpec { r_min: self.grid.node(lo), h: self.grid.h, n_cells: hi - lo };
        let mut u = self.u[lo..=hi].to_vec();
        let mut v = self.v[lo..=hi].to_vec();
        if lo > 0 {
            u[0] = 0.0;
            v[0] = 0.0;
        }
        if hi < self.grid.n_cells {
            let k = u.len() - 1;
            u[k] = 0.0;
            v[k] = 0.0;
        }
        Self::new(grid, u, v).expect("trimmed samples stay valid")
    }
}

fn interp(grid: &GridSpec, f: &[f64], r: f64) -> f64 {
    if r < grid.r_min || r > grid.r_max() {
        return 0.0;
    }
    let s = (r - grid.r_min) / grid.h;
    let i = (s.floor() as usize).min(grid.n_cells.saturating_sub(1));
    let t = s - i as f64;
    if i + 1 >= f.len() {
        return f[i];
    }
    f[i] * (1.0 - t) + f[i + 1] * t
}

/// Tent density on `[a, b]` with total mass `m`.
pub fn tent(a: f64, b: f64, m: f64) -> impl Fn(f64) -> f64 {
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    move |r| (m / hw * (1.0 - (r - c).abs() / hw)).max(0.0)
}

/// Support interval `(lo, hi)` of a sampled density: `lo`/`hi` are the nodes
/// just outside the run of samples above `SUPPORT_THRESHOLD * peak`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub lo: f64,
    pub hi: f64,
    /// No sample inside the support falls below the threshold.
    pub contiguous: bool,
    /// The support does not touch the grid ends.
    pub interior: bool,
}

pub fn support(grid: &GridSpec, f: &[f64]) -> Option<Support> {
    let peak = f.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return None;
    }
    let thr = SUPPORT_THRESHOLD * peak;
    let first = f.iter().position(|&x| x > thr)?;
    let last = f.iter().rposition(|&x| x > thr)?;
    let contiguous = f[first..=last].iter().all(|&x| x > thr);
    let interior = first > 0 && last < grid.n_cells;
    Some(Support {
        lo: grid.node(first.saturating_sub(1)),
        hi: grid.node((last + 1).min(grid.n_cells)),
        contiguous,
        interior,
    })
}

/// Outcome of the admissibility check for initial data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassUReport {
    pub valid: bool,
    pub support_u: Option<Support>,
    pub support_v: Option<Support>,
    pub violations: Vec<String>,
}

/// Check that `u`, `v` have interval supports `(L, R)`, `(D, E)` with
/// `L < D < R < E` and no interior zeros.
pub fn validate_class_u(p: &ProfilePair) -> ClassUReport {
    let mut violations = Vec::new();
    let su = support(&p.grid, &p.u);
    let sv = support(&p.grid, &p.v);
    for (name, s) in [("u", su), ("v", sv)] {
        match s {
            None => violations.push(format!("{name} has empty support")),
            Some(s) => {
                if !s.contiguous {
                    violations.push(format!("{name} vanishes inside its support"));
                }
                if !s.interior {
                    violations.push(format!("{name} support touches the grid boundary"));
                }
            }
        }
    }
    if let (Some(a), Some(b)) = (su, sv) {
        let (l, r, d, e) = (a.lo, a.hi, b.lo, b.hi);
        if !(l < d && d < r && r < e) {
            violations.push(format!("supports violate L < D < R < E: L={l}, D={d}, R={r}, E={e}"));
        }
    }
    ClassUReport { valid: violations.is_empty(), support_u: su, support_v: sv, violations }
}

/// Points where the `u`-tail equals `kappa_delta` and the `v`-head equals `kappa_delta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutPoints {
    pub r_delta: f64,
    pub d_delta: f64,
}

pub fn cut_points(p: &ProfilePair, kappa_delta: f64) -> Result<CutPoints, MacroError> {
    let su = split_right(&p.grid, &p.u, kappa_delta)?;
    let sv = split_left(&p.grid, &p.v, kappa_delta)?;
    Ok(CutPoints { r_delta: su.cut, d_delta: sv.cut })
}

/// The cut operator: the rightmost `kappa_delta` of `u` becomes `v` and the
/// leftmost `kappa_delta` of `v` becomes `u`.
pub fn apply_cut(p: &ProfilePair, kappa_delta: f64) -> Result<ProfilePair, MacroError> {
    let su = split_right(&p.grid, &p.u, kappa_delta)?;
    let sv = split_left(&p.grid, &p.v, kappa_delta)?;
    let u = su.kept.iter().zip(&sv.moved).map(|(a, b)| a + b).collect();
    let v = sv.kept.iter().zip(&su.moved).map(|(a, b)| a + b).collect();
    ProfilePair::new(p.grid, u, v)
}

/// Normalized discrete Gaussian kernel of variance `t` and its half-width in cells.
fn kernel(h: f64, t: f64) -> (Vec<f64>, usize) {
    let half = (KERNEL_RADIUS_SIGMAS * t.sqrt() / h).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * half)
        .map(|j| {
            let s = (j as f64 - half as f64) * h;
            (-s * s / (2.0 * t)).exp()
        })
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= z);
    (k, half)
}

fn convolve_on(grid: &GridSpec, f: &[f64], k: &[f64], half: usize) -> (GridSpec, Vec<f64>) {
    let pad = half + 1;
    let out_grid = grid.extended(pad, pad);
    let masses: Vec<f64> = f.iter().enumerate().map(|(i, &x)| grid.weight(i) * x).collect();
    let n_out = out_grid.n_nodes();
    let mut out = vec![0.0; n_out];
    // Input node i sits at output index i + pad; it spreads over i + pad - half ..= i + pad + half.
    for (i, &m) in masses.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let base = i + pad - half;
        for (j, &kj) in k.iter().enumerate() {
            out[base + j] += kj * m;
        }
    }
    for (i, x) in out.iter_mut().enumerate() {
        *x /= out_grid.weight(i);
    }
    (out_grid, out)
}

/// Convolution with the heat kernel of variance `t`, on a grid extended by the
/// truncation radius so no mass is lost.
pub fn gauss_convolve(grid: &GridSpec, f: &[f64], t: f64) -> Result<(GridSpec, Vec<f64>), MacroError> {
    if !(t > 0.0) {
        return Err(MacroError::NonPositiveTime(t));
    }
    let (k, half) = kernel(grid.h, t);
    Ok(convolve_on(grid, f, &k, half))
}

/// Convolve both species.
pub fn gauss_convolve_pair(p: &ProfilePair, t: f64) -> Result<ProfilePair, MacroError> {
    if !(t > 0.0) {
        return Err(MacroError::NonPositiveTime(t));
    }
    let (k, half) = kernel(p.grid.h, t);
    let (g, u) = convolve_on(&p.grid, &p.u, &k, half);
    let (_, v) = convolve_on(&p.grid, &p.v, &k, half);
    ProfilePair::new(g, u, v)
}

/// One barrier step: `Plus` convolves after cutting, `Minus` cuts after convolving.
pub fn barrier_step(p: &ProfilePair, delta: f64, kappa: f64, variant: Variant) -> Result<ProfilePair, MacroError> {
    let kd = kappa * delta;
    let next = match variant {
        Variant::Plus => gauss_convolve_pair(&apply_cut(p, kd)?, delta)?,
        Variant::Minus => apply_cut(&gauss_convolve_pair(p, delta)?, kd)?,
    };
    Ok(next.trimmed(TRIM_THRESHOLD))
}

/// `S_0, S_delta, ..., S_{n delta}` for one variant.
pub fn iterate_barriers(
    p0: &ProfilePair,
    delta: f64,
    kappa: f64,
    n: usize,
    variant: Variant,
) -> Result<Vec<ProfilePair>, MacroError> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(p0.clone());
    for _ in 0..n {
        let next = barrier_step(out.last().expect("non-empty"), delta, kappa, variant)?;
        out.push(next);
    }
    Ok(out)
}

/// `n`-fold heat convolution of `f` with step `t`, trimmed like the barrier iteration.
pub fn heat_evolve(grid: &GridSpec, f: &[f64], t: f64, n: usize) -> Result<(GridSpec, Vec<f64>), MacroError> {
    let mut p = ProfilePair::new(*grid, f.to_vec(), vec![0.0; f.len()])?;
    for _ in 0..n {
        let (g, w) = gauss_convolve(&p.grid, &p.u, t)?;
        p = ProfilePair::new(g, w, vec![0.0; g.n_nodes()])?.trimmed(TRIM_THRESHOLD);
    }
    Ok((p.grid, p.u))
}

/// `sum_i w_i |f_i - g_i|` over the union of two aligned grids.
pub fn l1_distance(gf: &GridSpec, f: &[f64], gg: &GridSpec, g: &[f64]) -> Result<f64, MacroError> {
    let grid = gf.union(gg)?;
    let a = grid.embed(gf, f)?;
    let b = grid.embed(gg, g)?;
    Ok(a.iter().zip(&b).enumerate().map(|(i, (x, y))| grid.weight(i) * (x - y).abs()).sum())
}

/// Node-wise average of two profiles on their common grid.
pub fn midpoint(p: &ProfilePair, q: &ProfilePair) -> Result<ProfilePair, MacroError> {
    let grid = p.grid.union(&q.grid)?;
    let a = p.embedded(&grid)?;
    let b = q.embedded(&grid)?;
    let u = a.u.iter().zip(&b.u).map(|(x, y)| 0.5 * (x + y)).collect();
    let v = a.v.iter().zip(&b.v).map(|(x, y)| 0.5 * (x + y)).collect();
    ProfilePair::new(grid, u, v)
}

/// Largest value of `F(r; lower) - F(r; upper)` and where it is attained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderCheck {
    pub holds: bool,
    pub worst_r: f64,
    pub worst_excess: f64,
}

/// `sup_r [F(r; f) - F(r; g)]` over all `r`, exact because both tails are
/// piecewise linear with known kinks.
pub fn tail_excess(f: &TailFn, g: &TailFn) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &r in f.edges().iter().chain(g.edges()) {
        let d = f.eval(r) - g.eval(r);
        if d > best.0 {
            best = (d, r);
        }
    }
    best
}

/// `p1` precedes `p2` modulo `m`: `F(r; u1) <= F(r; u2) + m` for all `r`.
pub fn order_mod_m(p1: &ProfilePair, p2: &ProfilePair, m: f64) -> OrderCheck {
    let (excess, r) = tail_excess(&p1.tail_u(), &p2.tail_u());
    OrderCheck { holds: excess <= m, worst_r: r, worst_excess: excess }
}

/// Upper repair: the leftmost `m` of `u` becomes `v` and the rightmost `m` of
/// `v` becomes `u`, producing a pair that dominates both `p` and anything
/// below `p` modulo `m`.
pub fn repair_upper(p: &ProfilePair, m: f64) -> Result<ProfilePair, MacroError> {
    check_repair_mass(p, m)?;
    let su = split_left(&p.grid, &p.u, m)?;
    let sv = split_right(&p.grid, &p.v, m)?;
    if m > 0.0 && su.cut >= sv.cut {
        return Err(MacroError::RepairGeometry { lower: su.cut, upper: sv.cut });
    }
    let u = su.kept.iter().zip(&sv.moved).map(|(a, b)| a + b).collect();
    let v = sv.kept.iter().zip(&su.moved).map(|(a, b)| a + b).collect();
    ProfilePair::new(p.grid, u, v)
}

/// Lower repair: the rightmost `m` of `u` becomes `v` and the leftmost `m` of
/// `v` becomes `u`.
pub fn repair_lower(p: &ProfilePair, m: f64) -> Result<ProfilePair, MacroError> {
    check_repair_mass(p, m)?;
    let su = split_right(&p.grid, &p.u, m)?;
    let sv = split_left(&p.grid, &p.v, m)?;
    if m > 0.0 && sv.cut >= su.cut {
        return Err(MacroError::RepairGeometry { lower: sv.cut, upper: su.cut });
    }
    let u = su.kept.iter().zip(&sv.moved).map(|(a, b)| a + b).collect();
    let v = sv.kept.iter().zip(&su.moved).map(|(a, b)| a + b).collect();
    ProfilePair::new(p.grid, u, v)
}

/// Largest admissible repair mass for `p`.
pub fn repair_threshold(p: &ProfilePair) -> f64 {
    0.1 * p.mass_u.min(p.mass_v)
}

fn check_repair_mass(p: &ProfilePair, m: f64) -> Result<(), MacroError> {
    let m0 = repair_threshold(p);
    if !(m >= 0.0) || m >= m0 {
        return Err(MacroError::RepairMassTooLarge { m, m0 });
    }
    Ok(())
}

/// Pair in `B(phi, m0)` with all of its `u` mass packed to the left
/// (`right = false`) or to the right of `phi`; these are the least and the
/// greatest elements for the tail order.
pub fn extreme_in_b(grid: &GridSpec, phi: &[f64], m0: f64, right: bool) -> Result<ProfilePair, MacroError> {
    let s = if right { split_right(grid, phi, m0)? } else { split_left(grid, phi, m0)? };
    ProfilePair::new(*grid, s.moved, s.kept)
}

/// Random class-U pair in `B(phi, m0)`: `u = phi` left of a point `D`,
/// `u = 0` right of a point `R > D`, and `u = phi * a^gamma` in between for a
/// random piecewise-linear fraction `a` in `(0, 1)`, with `gamma` tuned so
/// that `u` has mass `m0`.
pub fn random_in_b<R: Rng + ?Sized>(grid: &GridSpec, phi: &[f64], m0: f64, rng: &mut R) -> Result<ProfilePair, MacroError> {
    let total = mass(grid, phi);
    if !(m0 > 0.0 && m0 < total) {
        return Err(MacroError::Profile(format!("u mass {m0} must lie strictly inside (0, {total})")));
    }
    for _ in 0..100 {
        if let Some(u) = try_in_b(grid, phi, m0, total, rng)? {
            let v = phi.iter().zip(&u).map(|(p, u)| (p - u).max(0.0)).collect();
            return ProfilePair::new(*grid, u, v);
        }
    }
    Err(MacroError::Profile(format!("no class-U split of mass {m0} found")))
}

/// One draw of `D`, `R` and `a`; `None` if `m0` is out of reach for
/// `gamma` in `[1/8, 8]`.
fn try_in_b<R: Rng + ?Sized>(
    grid: &GridSpec,
    phi: &[f64],
    m0: f64,
    total: f64,
    rng: &mut R,
) -> Result<Option<Vec<f64>>, MacroError> {
    let d = split_left(grid, phi, m0 * rng.random_range(0.1..0.9))?.cut;
    let r = split_left(grid, phi, m0 + (total - m0) * rng.random_range(0.1..0.9))?.cut;
    let knots = rng.random_range(1..6usize);
    let vals: Vec<f64> = (0..=knots).map(|_| rng.random_range(0.05..0.95)).collect();
    let a: Vec<f64> = (0..grid.n_nodes())
        .map(|i| {
            let x = grid.node(i);
            if x <= d {
                1.0
            } else if x >= r {
                0.0
            } else {
                let y = (x - d) / (r - d) * knots as f64;
                let k = (y.floor() as usize).min(knots - 1);
                vals[k] + (y - k as f64) * (vals[k + 1] - vals[k])
            }
        })
        .collect();
    let u_of = |ln_gamma: f64| -> Vec<f64> {
        let g = ln_gamma.exp();
        phi.iter().zip(&a).map(|(p, a)| p * a.powf(g)).collect()
    };
    // Mass is decreasing in gamma.
    let (mut lo, mut hi) = (-(8f64.ln()), 8f64.ln());
    if mass(grid, &u_of(lo)) < m0 || mass(grid, &u_of(hi)) > m0 {
        return Ok(None);
    }
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if mass(grid, &u_of(mid)) > m0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut u = u_of(0.5 * (lo + hi));
    let m = mass(grid, &u);
    // Rescale the mixed part to absorb the bisection residual.
    let full: f64 = (0..u.len()).filter(|&i| a[i] == 1.0).map(|i| grid.weight(i) * u[i]).sum();
    let scale = (m0 - full) / (m - full);
    for ((x, a), p) in u.iter_mut().zip(&a).zip(phi) {
        if *a < 1.0 {
            *x = (*x * scale).min(*p);
        }
    }
    Ok(Some(u))
}

fn mix(p: &ProfilePair, q: &ProfilePair, lambda: f64) -> Result<ProfilePair, MacroError> {
    let c = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
    ProfilePair::new(p.grid, c(&p.u, &q.u), c(&p.v, &q.v))
}

/// Random `(lower, upper)` in `B(phi, m0)` with `lower` preceding `upper`.
/// Every mixture contains a strictly class-U component, so both stay in the class.
///
/// Both are convex combinations `lambda * (mu * X + (1 - mu) * Z) + (1 - lambda) * W`
/// sharing `Z` and `W`, with `X` the left-packed element for `lower` and a
/// random element for `upper`; tails are linear in the profile, so the order
/// of `X` carries over.
pub fn random_ordered_pair<R: Rng + ?Sized>(
    grid: &GridSpec,
    phi: &[f64],
    m0: f64,
    rng: &mut R,
) -> Result<(ProfilePair, ProfilePair), MacroError> {
    let left = extreme_in_b(grid, phi, m0, false)?;
    let top = random_in_b(grid, phi, m0, rng)?;
    let z = random_in_b(grid, phi, m0, rng)?;
    let w = random_in_b(grid, phi, m0, rng)?;
    let (mu, lambda) = (rng.random_range(0.05..1.0), rng.random_range(0.05..1.0));
    let lower = mix(&mix(&left, &z, mu)?, &w, lambda)?;
    let upper = mix(&mix(&top, &z, mu)?, &w, lambda)?;
    Ok((lower, upper))
}

/// Random density positive exactly on `(lo, hi)`: a tent spanning the
/// interval plus up to two random tents inside it.
pub fn random_tents<R: Rng + ?Sized>(grid: &GridSpec, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let base = tent(lo, hi, rng.random_range(0.5..1.5));
    let mut f: Vec<f64> = (0..grid.n_nodes()).map(|i| base(grid.node(i))).collect();
    for _ in 0..rng.random_range(0..=2) {
        let w = rng.random_range(0.2..0.5) * (hi - lo);
        let a = rng.random_range(lo..hi - w);
        let t = tent(a, a + w, rng.random_range(0.3..1.5));
        for (i, x) in f.iter_mut().enumerate() {
            *x += t(grid.node(i));
        }
    }
    f
}
