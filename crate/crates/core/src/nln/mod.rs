//! Logic operations as neural modules.
//!
//! Variables are `d`-dimensional vectors, AND/OR/NOT are small MLPs, and the
//! truth of an expression is `Sim(e, T)` against a fixed random anchor `T`.

mod graph;
mod model;

pub use graph::{Built, GraphBuildResult, GraphBuilder, VRef};
pub use model::{BinaryOp, Bound, BoundModule, Forward, ModuleIds, NlnConfig, NlnModel};

use crate::autodiff::{AutodiffError, Tape};
use crate::logic::Expr;

/// Probability that each expression is true, evaluation mode. A degenerate
/// expression vector scores 0.5.
pub fn predict_batch(model: &NlnModel, exprs: &[Expr]) -> Result<Vec<f64>, AutodiffError> {
    if exprs.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, model, None);
    let g = fwd.build_graphs(exprs)?;
    let t = fwd.anchor();
    let (p, _) = fwd.sim_guarded(g.root, t)?;
    Ok(fwd.tape.value(p).column(0).to_vec())
}

/// Predictions in chunks, bounding tape size on large evaluation sets.
pub fn predict_all(model: &NlnModel, exprs: &[Expr], chunk: usize) -> Result<Vec<f64>, AutodiffError> {
    let mut out = Vec::with_capacity(exprs.len());
    for part in exprs.chunks(chunk.max(1)) {
        out.extend(predict_batch(model, part)?);
    }
    Ok(out)
}

pub fn predict(model: &NlnModel, expr: &Expr) -> Result<f64, AutodiffError> {
    Ok(predict_batch(model, std::slice::from_ref(expr))?[0])
}
