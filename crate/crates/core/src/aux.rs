//! Block-wise auxiliary color evolutions.
//!
//! Time is cut into blocks `[t_k, t_{k+1}]` with `t_k = k * epsilon^-2 * delta`.
//! Inside a block the positions move exactly as in the true evolution. The
//! `Plus` evolution applies all flips of the block's rings `(t_k, t_{k+1}]` at
//! the block start (positions `x(t_k)`); the `Minus` evolution applies them at
//! the block end (positions `x(t_{k+1})`).

use thiserror::Error;

use crate::lattice::{flip, EventLog, LatticeError, ParticleState, PositionCursor, WalkRealization};
use crate::Variant;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuxError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("block misaligned: {0}")]
    Misaligned(String),
}

/// Smallest `K` with `K * delta >= horizon_t`.
pub fn block_count(horizon_t: f64, delta: f64) -> usize {
    let k = horizon_t / delta;
    ((k - 1e-9 * k.max(1.0)).ceil() as usize).max(1)
}

/// Microscopic block boundaries `t_0 = 0, ..., t_K`.
pub fn block_times(epsilon: f64, delta: f64, k: usize) -> Vec<f64> {
    let step = delta / (epsilon * epsilon);
    (0..=k).map(|j| j as f64 * step).collect()
}

fn check_start(ps: &ParticleState, cursor: &PositionCursor<'_>, t0: f64) -> Result<(), AuxError> {
    if ps.time != t0 {
        return Err(AuxError::Misaligned(format!("state at time {} but block starts at {t0}", ps.time)));
    }
    if cursor.positions != ps.positions {
        return Err(AuxError::Misaligned(format!("positions differ from the walk realization at {t0}")));
    }
    Ok(())
}

fn run_block(
    ps: &ParticleState,
    log: &EventLog,
    cursor: &mut PositionCursor<'_>,
    t0: f64,
    t1: f64,
    variant: Variant,
) -> Result<ParticleState, AuxError> {
    if t1 < t0 {
        return Err(LatticeError::BackwardTime { from: t0, to: t1 }.into());
    }
    check_start(ps, cursor, t0)?;
    let marks = log.marks_in(t0, t1);
    let mut colors = ps.colors.clone();
    if variant == Variant::Plus {
        for &m in marks {
            flip(&cursor.positions, &mut colors, m);
        }
    }
    cursor.advance_to(t1)?;
    if variant == Variant::Minus {
        for &m in marks {
            flip(&cursor.positions, &mut colors, m);
        }
    }
    Ok(ParticleState { positions: cursor.positions.clone(), colors, time: t1 })
}

/// One anticipated block `[t0, t1]` on the shared walk realization.
pub fn run_block_plus(
    ps: &ParticleState,
    log: &EventLog,
    walks: &WalkRealization,
    t0: f64,
    t1: f64,
) -> Result<ParticleState, AuxError> {
    let mut c = walks.cursor();
    c.advance_to(t0)?;
    run_block(ps, log, &mut c, t0, t1, Variant::Plus)
}

/// One postponed block `[t0, t1]` on the shared walk realization.
pub fn run_block_minus(
    ps: &ParticleState,
    log: &EventLog,
    walks: &WalkRealization,
    t0: f64,
    t1: f64,
) -> Result<ParticleState, AuxError> {
    let mut c = walks.cursor();
    c.advance_to(t0)?;
    run_block(ps, log, &mut c, t0, t1, Variant::Minus)
}

/// States at `t_0, ..., t_K` of the auxiliary evolution started from `ps`
/// (which must sit at the walk realization's start).
pub fn run_aux(
    ps: &ParticleState,
    log: &EventLog,
    walks: &WalkRealization,
    times: &[f64],
    variant: Variant,
) -> Result<Vec<ParticleState>, AuxError> {
    let Some(&t_first) = times.first() else {
        return Ok(Vec::new());
    };
    let mut c = walks.cursor();
    c.advance_to(t_first)?;
    let mut out = Vec::with_capacity(times.len());
    out.push(ps.clone());
    for w in times.windows(2) {
        let next = run_block(out.last().expect("non-empty"), log, &mut c, w[0], w[1], variant)?;
        out.push(next);
    }
    Ok(out)
}
