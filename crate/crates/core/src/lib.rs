//! Cascades of conditional Schrödinger bridges on discretized measures.
//!
//! Measures live on product grids ([`grid`]). A single bridge is solved by
//! Fortet iteration ([`sfe`]); a block-triangular system of conditional
//! bridges is solved level by level and assembled into global couplings
//! ([`cascade`]). [`kr`] provides the Knothe–Rosenblatt baseline,
//! [`bernstein`] a two-dimensional Gaussian path example, and [`oracle`]
//! brute-force minimizers for small instances.

// `!(x > 0.0)` is the idiom here for rejecting NaN together with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// index loops mirror the flat row-major layouts they walk
#![allow(clippy::needless_range_loop)]

pub mod bernstein;
pub mod cascade;
pub mod error;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod kr;
pub mod numeric;
pub mod oracle;
pub mod sfe;

pub use error::{Error, Result};
pub use grid::{Axis, BlockStructure, DiscreteCDF, GridMeasure};
pub use kernel::{BlockKernelSet, Kernel, KernelSpec, KernelTable};
pub use sfe::{BridgeSolution, FortetDiagnostics, FortetOptions, Potentials};
