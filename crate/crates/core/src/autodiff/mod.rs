//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The engine carries exactly the primitives the logic network needs. Values
//! are matrices so that a batch of vectors can flow through one matrix product.

mod adam;
pub mod gradcheck;
mod params;
mod tape;

pub use adam::AdamState;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{AutodiffError, NodeId, Tape, DEGENERATE_NORM, LOG_CLAMP};

pub use tape::stable_sigmoid;
