//! Two-species random walks on `Z` with rank-based color exchange.
//!
//! The crate is split along the layers of the model:
//!
//! * [`lattice`]: exact event-driven simulation of the microscopic system
//!   (independent walks plus a marked Poisson clock flipping the rightmost `a`
//!   or the leftmost `b`).
//! * [`aux`]: the block-wise anticipated (`+`) and postponed (`-`) color
//!   evolutions driven by the same walks and clock.
//! * [`coupling`]: the tail-mass order, splittings into married pairs,
//!   singletons and discrepancies, the `C`/`R` maps and the pathwise sandwich
//!   checker.
//! * [`macroscopic`]: gridded profiles, the cut operator, Gaussian
//!   convolution, barrier iterations and the repair operators.
//! * [`fbp`]: the free-boundary reference solution, boundary/flux extraction
//!   and Monte Carlo validation of the probabilistic representation.
//! * [`export`]: CSV/JSON writers shared by the command line harness.

pub mod aux;
pub mod coupling;
pub mod export;
pub mod fbp;
pub mod lattice;
pub mod macroscopic;
pub mod rng;

pub use lattice::{Color, Mark};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

use serde::{Deserialize, Serialize};

/// Which barrier / auxiliary evolution: `Plus` anticipates the block's color
/// changes, `Minus` postpones them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plus,
    Minus,
}
