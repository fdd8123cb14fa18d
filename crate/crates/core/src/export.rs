//! CSV and JSON writers for run artifacts.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::fbp::BoundaryCurves;
use crate::lattice::{occupation, tail_mass, ParticleState};
use crate::macroscopic::ProfilePair;

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, ExportError> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

#[derive(Serialize)]
struct ParticleRow {
    replica: u64,
    time: f64,
    label: usize,
    position: i64,
    color: String,
}

/// One row per particle and `(replica, state)`.
pub fn write_snapshots(path: &Path, states: &[(u64, ParticleState)]) -> Result<(), ExportError> {
    let mut w = writer(path)?;
    for (replica, s) in states {
        for (label, (&position, c)) in s.positions.iter().zip(&s.colors).enumerate() {
            w.serialize(ParticleRow { replica: *replica, time: s.time, label, position, color: c.to_string() })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct OccupationRow {
    replica: u64,
    time: f64,
    site: i64,
    xi: u64,
    eta: u64,
    tail_a: u64,
    tail_total: u64,
}

/// Occupied sites of each `(replica, state)` with their right tails.
pub fn write_occupations(path: &Path, states: &[(u64, ParticleState)]) -> Result<(), ExportError> {
    let mut w = writer(path)?;
    for (replica, ps) in states {
        let occ = occupation(ps);
        let lo = ps.positions.iter().min().copied().unwrap_or(0);
        let hi = ps.positions.iter().max().copied().unwrap_or(0);
        for site in lo..=hi {
            let (xi, eta) = (occ.xi.get(site), occ.eta.get(site));
            if xi + eta == 0 {
                continue;
            }
            let tail_a = tail_mass(&occ.xi, site);
            w.serialize(OccupationRow {
                replica: *replica,
                time: ps.time,
                site,
                xi,
                eta,
                tail_a,
                tail_total: tail_a + tail_mass(&occ.eta, site),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ProfileRow {
    r: f64,
    u: f64,
    v: f64,
    tail_u: f64,
    tail_v: f64,
}

/// Node values and tails of one profile.
pub fn write_profile(path: &Path, p: &ProfilePair) -> Result<(), ExportError> {
    let (tu, tv) = (p.tail_u(), p.tail_v());
    let g = p.grid();
    let mut w = writer(path)?;
    for i in 0..g.n_nodes() {
        let r = g.node(i);
        w.serialize(ProfileRow { r, u: p.u()[i], v: p.v()[i], tail_u: tu.eval(r), tail_v: tv.eval(r) })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BoundaryRow {
    t: f64,
    u_edge: f64,
    v_edge: f64,
    u_front: f64,
    v_front: f64,
}

pub fn write_boundaries(path: &Path, b: &BoundaryCurves) -> Result<(), ExportError> {
    let mut w = writer(path)?;
    for i in 0..b.times.len() {
        w.serialize(BoundaryRow {
            t: b.times[i],
            u_edge: b.u_edge[i],
            v_edge: b.v_edge[i],
            u_front: b.u_front[i],
            v_front: b.v_front[i],
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Any serializable rows, header taken from the field names.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExportError> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), ExportError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}
