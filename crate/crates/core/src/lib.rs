//! Neural logic networks: propositional logic learned as neural modules over
//! vector-valued variables, with logical-law regularization.

pub mod autodiff;
pub mod baseline_mf;
pub mod logic;
pub mod metrics;
pub mod nln;
pub mod rec;
pub mod regularizers;
pub mod rng;
pub mod training;

pub use ndarray;
