//! Logical-law regularizers, the vector-length penalty and parameter ℓ2.
//!
//! Each law compares a module output against the vector the law says it should
//! equal, using `Sim`. With the W-set stacked as rows, all laws for all vectors
//! are evaluated with a handful of matrix products: the first layer of a
//! binary module is split as `H1 · (a | b) = H1[:, :d] · a + H1[:, d:] · b`, so
//! the `w`-half is computed once and shared by the four laws of that module.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::nln::{BinaryOp, Forward, NlnModel};
use crate::rng::Rng;

/// Weights of the three regularization terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub lambda_l: f64,
    pub lambda_len: f64,
    pub lambda_theta: f64,
}

impl RegWeights {
    pub const NONE: RegWeights = RegWeights {
        lambda_l: 0.0,
        lambda_len: 0.0,
        lambda_theta: 0.0,
    };

    pub fn validate(&self) -> Result<(), String> {
        let all = [self.lambda_l, self.lambda_len, self.lambda_theta];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(format!("regularizer weights must be finite and >= 0: {self:?}"));
        }
        Ok(())
    }
}

/// Values of every regularizer on one W-set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegReport {
    /// r1..r10, each the mean over its index set.
    pub r: [f64; 10],
    /// Mean squared norm over the W-set.
    pub length: f64,
    /// Squared norm of the module parameters.
    pub param: f64,
    /// Sim terms replaced by the constant 0.5 because a vector was degenerate.
    pub degenerate: usize,
}

impl RegReport {
    pub fn logic_sum(&self) -> f64 {
        self.r.iter().sum()
    }

    /// Elementwise mean of several reports.
    pub fn average(reports: &[RegReport]) -> RegReport {
        let mut out = RegReport::default();
        if reports.is_empty() {
            return out;
        }
        let k = reports.len() as f64;
        for rep in reports {
            for i in 0..10 {
                out.r[i] += rep.r[i] / k;
            }
            out.length += rep.length / k;
            out.param += rep.param / k;
            out.degenerate += rep.degenerate;
        }
        out
    }
}

/// The ten laws over the rows of `w`. Returns `Σ rᵢ` and the per-law report
/// (`length` and `param` left at zero).
pub fn logic_reg(fwd: &mut Forward<'_>, w: NodeId) -> Result<(NodeId, RegReport), AutodiffError> {
    let n = fwd.tape.shape(w).0;
    if n == 0 {
        return Err(AutodiffError::Contract("empty W-set".into()));
    }
    let t = fwd.anchor();
    let f = fwd.false_vec()?;
    let nw = fwd.not_mod(w)?;
    let nnw = fwd.not_mod(nw)?;
    let mut degenerate = 0;

    // r1 over W ∪ {T}: NOT(T) is F.
    let lhs = fwd.tape.stack(&[nw, f])?;
    let rhs = fwd.tape.stack(&[w, t])?;
    let (s1, d1) = fwd.sim_guarded(lhs, rhs)?;
    degenerate += d1;
    let r1 = fwd.tape.mean(s1);

    let (s2, d2) = fwd.sim_guarded(nnw, w)?;
    degenerate += d2;
    let m2 = fwd.tape.mean(s2);

    let (and_means, d_and) = law_block(fwd, BinaryOp::And, w, nw, t, f)?;
    let (or_means, d_or) = law_block(fwd, BinaryOp::Or, w, nw, t, f)?;
    degenerate += d_and + d_or;

    // r3..r6 from AND in order (w,T)->w, (w,F)->F, (w,w)->w, (w,¬w)->F.
    // OR gives (w,T)->T, (w,F)->w, (w,w)->w, (w,¬w)->T, i.e. r8, r7, r9, r10.
    let ordered = [
        m2,
        and_means[0],
        and_means[1],
        and_means[2],
        and_means[3],
        or_means[1],
        or_means[0],
        or_means[2],
        or_means[3],
    ];
    let mut terms = vec![r1];
    for m in ordered {
        terms.push(fwd.tape.scale_shift(m, -1.0, 1.0));
    }
    let mut report = RegReport {
        degenerate,
        ..RegReport::default()
    };
    for (i, &term) in terms.iter().enumerate() {
        report.r[i] = fwd.tape.scalar(term);
    }
    let stacked = fwd.tape.stack(&terms)?;
    let total = fwd.tape.sum(stacked);
    Ok((total, report))
}

/// Applies one binary module to `(w, T)`, `(w, F)`, `(w, w)` and `(w, ¬w)` for
/// every row and returns the mean `Sim` of each against its law's target.
fn law_block(
    fwd: &mut Forward<'_>,
    op: BinaryOp,
    w: NodeId,
    nw: NodeId,
    t: NodeId,
    f: NodeId,
) -> Result<([NodeId; 4], usize), AutodiffError> {
    let d = fwd.d();
    let n = fwd.tape.shape(w).0;
    let m = fwd.module(op);
    let h1_left = fwd.tape.slice_cols(m.h1, 0, d)?;
    let h1_right = fwd.tape.slice_cols(m.h1, d, 2 * d)?;
    let left = fwd.tape.affine(h1_left, w, m.b)?;

    let right_t = fwd.tape.matmul_t(t, h1_right)?;
    let right_f = fwd.tape.matmul_t(f, h1_right)?;
    let right_w = fwd.tape.matmul_t(w, h1_right)?;
    let right_nw = fwd.tape.matmul_t(nw, h1_right)?;
    let pre_t = fwd.tape.add_row(left, right_t)?;
    let pre_f = fwd.tape.add_row(left, right_f)?;
    let pre_w = fwd.tape.add(left, right_w)?;
    let pre_nw = fwd.tape.add(left, right_nw)?;
    let pre = fwd.tape.stack(&[pre_t, pre_f, pre_w, pre_nw])?;
    let hidden = fwd.activate(pre);
    let out = fwd.tape.matmul_t(hidden, m.h2)?;

    // Targets drawn from sources [w, T, F].
    let (tw, tt, tf) = (0u32, 1u32, 2u32);
    let targets: [u32; 4] = match op {
        BinaryOp::And => [tw, tf, tw, tf],
        BinaryOp::Or => [tt, tw, tw, tt],
    };
    let mut picks = Vec::with_capacity(4 * n);
    for src in targets {
        for r in 0..n as u32 {
            picks.push(if src == tw { (tw, r) } else { (src, 0) });
        }
    }
    let target = fwd.tape.gather(&[w, t, f], &picks)?;
    let (sims, degenerate) = fwd.sim_guarded(out, target)?;
    let mut means = [sims; 4];
    for (k, slot) in means.iter_mut().enumerate() {
        let rows: Vec<usize> = (k * n..(k + 1) * n).collect();
        let block = fwd.tape.rows(sims, &rows)?;
        *slot = fwd.tape.mean(block);
    }
    Ok((means, degenerate))
}

/// Mean squared norm over the rows of `w`.
pub fn length_reg(tape: &mut Tape, w: NodeId) -> NodeId {
    let n = tape.shape(w).0.max(1);
    let sq = tape.l2_norm_sq(w);
    tape.scale(sq, 1.0 / n as f64)
}

/// Sum of squared entries over `params`.
pub fn param_reg(tape: &mut Tape, params: &[NodeId]) -> Result<NodeId, AutodiffError> {
    if params.is_empty() {
        return Ok(tape.scalar_leaf(0.0));
    }
    let parts: Vec<NodeId> = params.iter().map(|&p| tape.l2_norm_sq(p)).collect();
    let stacked = tape.stack(&parts)?;
    Ok(tape.sum(stacked))
}

/// Parameter nodes of the model's three modules on the forward's tape.
pub fn module_param_nodes(fwd: &Forward<'_>) -> Vec<NodeId> {
    let b = fwd.bound;
    vec![
        b.and.h1, b.and.h2, b.and.b, b.or.h1, b.or.h2, b.or.b, b.not.h1, b.not.h2, b.not.b,
    ]
}

/// `task + λ_l Σ rᵢ + λ_len · length + λ_θ · ‖Θ‖²`.
///
/// The logic term is only put on the tape when `λ_l > 0`; its dropout masks come
/// from `reg_rng` when given, so the task graph sees the same random stream
/// whatever the logic weight.
pub fn total_loss<'a>(
    fwd: &mut Forward<'a>,
    task_loss: NodeId,
    w_set: NodeId,
    weights: RegWeights,
    reg_rng: Option<&'a mut Rng>,
) -> Result<(NodeId, RegReport), AutodiffError> {
    let mut terms = vec![task_loss];
    let mut report = RegReport::default();
    if weights.lambda_l > 0.0 {
        let restore = match (fwd.training(), reg_rng) {
            (true, Some(rng)) => Some(fwd.swap_dropout(Some(rng))),
            _ => None,
        };
        let result = logic_reg(fwd, w_set);
        if let Some(prev) = restore {
            fwd.swap_dropout(prev);
        }
        let (logic, rep) = result?;
        report = rep;
        terms.push(fwd.tape.scale(logic, weights.lambda_l));
    }
    let length = length_reg(fwd.tape, w_set);
    report.length = fwd.tape.scalar(length);
    if weights.lambda_len > 0.0 {
        terms.push(fwd.tape.scale(length, weights.lambda_len));
    }
    let params = module_param_nodes(fwd);
    let param = param_reg(fwd.tape, &params)?;
    report.param = fwd.tape.scalar(param);
    if weights.lambda_theta > 0.0 {
        terms.push(fwd.tape.scale(param, weights.lambda_theta));
    }
    if terms.len() == 1 {
        return Ok((task_loss, report));
    }
    let stacked = fwd.tape.stack(&terms)?;
    Ok((fwd.tape.sum(stacked), report))
}

/// Report of all regularizers on `model`'s graphs of `exprs`, evaluation mode.
pub fn report_for(model: &NlnModel, exprs: &[crate::logic::Expr]) -> Result<RegReport, AutodiffError> {
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, model, None);
    let g = fwd.build_graphs(exprs)?;
    let (_, mut rep) = logic_reg(&mut fwd, g.w_set)?;
    let length = length_reg(fwd.tape, g.w_set);
    rep.length = fwd.tape.scalar(length);
    let params = module_param_nodes(&fwd);
    let param = param_reg(fwd.tape, &params)?;
    rep.param = fwd.tape.scalar(param);
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::parse;
    use crate::nln::NlnConfig;
    use crate::rng::Stream;
    use ndarray::{array, Array2};

    const SIG10: f64 = 0.999_954_602_131_297_6;

    fn model(d: usize, vocab: usize) -> NlnModel {
        let cfg = NlnConfig {
            d,
            ..NlnConfig::default()
        };
        NlnModel::init(cfg, vocab, &mut Rng::new(3, Stream::Init))
    }

    fn report(m: &NlnModel, w: Array2<f64>) -> RegReport {
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, m, None);
        let w = fwd.tape.leaf(w);
        logic_reg(&mut fwd, w).unwrap().1
    }

    #[test]
    fn laws_lie_in_unit_interval_and_sum() {
        let m = model(8, 20);
        let e = parse("(v1 & ~v2 & v3) | (v4 & v5) | ~v6").unwrap();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &m, None);
        let g = fwd.build_graph(&e).unwrap();
        let (total, rep) = logic_reg(&mut fwd, g.w_set).unwrap();
        assert!(rep.r.iter().all(|&r| r > 0.0 && r < 1.0), "{:?}", rep.r);
        assert!((fwd.tape.scalar(total) - rep.logic_sum()).abs() < 1e-12);
        assert_eq!(rep.degenerate, 0);
    }

    #[test]
    fn double_negation_with_exact_negation() {
        // On span{(1, -1)} this NOT is exact negation.
        let mut m = model(2, 1);
        *m.store.value_mut(m.not.h1) = array![[1.0, -1.0], [-1.0, 1.0]];
        *m.store.value_mut(m.not.h2) = array![[-0.5, 0.5], [0.5, -0.5]];
        m.store.value_mut(m.not.b).fill(0.0);
        *m.store.value_mut(m.anchor) = array![[1.0, -1.0]];
        let rep = report(&m, array![[0.5, -0.5], [-2.0, 2.0], [3.0, -3.0]]);
        assert!((rep.r[1] - (1.0 - SIG10)).abs() < 1e-12, "r2 = {}", rep.r[1]);
        assert!((rep.r[1] - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn negation_law_with_identity_not() {
        let mut m = model(3, 1);
        *m.store.value_mut(m.not.h1) = Array2::eye(3);
        *m.store.value_mut(m.not.h2) = Array2::eye(3);
        m.store.value_mut(m.not.b).fill(0.0);
        *m.store.value_mut(m.anchor) = array![[0.2, 0.5, 1.0]];
        let rep = report(&m, array![[1.0, 2.0, 0.5], [0.1, 0.1, 3.0]]);
        assert!((rep.r[0] - SIG10).abs() < 1e-12, "r1 = {}", rep.r[0]);
    }

    #[test]
    fn idempotent_and() {
        let mut m = model(3, 1);
        let mut h1 = Array2::zeros((3, 6));
        h1.slice_mut(ndarray::s![.., ..3]).assign(&Array2::eye(3));
        *m.store.value_mut(m.and.h1) = h1;
        *m.store.value_mut(m.and.h2) = Array2::eye(3);
        m.store.value_mut(m.and.b).fill(0.0);
        let rep = report(&m, array![[1.0, 2.0, 0.5], [0.3, 0.1, 3.0]]);
        assert!((rep.r[4] - 4.54e-5).abs() < 1e-7, "r5 = {}", rep.r[4]);
    }

    #[test]
    fn degenerate_terms_are_guarded() {
        let mut m = model(4, 1);
        let ids = m.module_params();
        for id in ids {
            m.store.value_mut(id).fill(0.0);
        }
        let rep = report(&m, Array2::from_elem((2, 4), 0.5));
        assert!(rep.degenerate > 0);
        assert!(rep.r.iter().all(|r| r.is_finite()));
        assert_eq!(rep.r[0], 0.5);
    }

    #[test]
    fn length_values_and_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(array![[1.0, 0.0], [0.0, 2.0]]);
        let l = length_reg(&mut tape, w);
        assert_eq!(tape.scalar(l), 2.5);
        let z = tape.leaf(Array2::zeros((3, 2)));
        let l = length_reg(&mut tape, z);
        assert_eq!(tape.scalar(l), 0.0);
        let x = tape.vector(&[1.0, 2.0]);
        let l = length_reg(&mut tape, x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x), array![[2.0, 4.0]]);
    }

    #[test]
    fn param_values() {
        let mut tape = Tape::new();
        let z = tape.leaf(Array2::zeros((2, 2)));
        let p = param_reg(&mut tape, &[z]).unwrap();
        assert_eq!(tape.scalar(p), 0.0);
        let eye = tape.leaf(Array2::eye(2));
        let p = param_reg(&mut tape, &[eye]).unwrap();
        assert_eq!(tape.scalar(p), 2.0);
        let b = tape.vector(&[3.0, 4.0]);
        let p = param_reg(&mut tape, &[eye, b]).unwrap();
        assert_eq!(tape.scalar(p), 27.0);
    }

    fn total_with(m: &NlnModel, weights: RegWeights) -> (f64, f64) {
        let e = parse("(v0 & v1) | ~v2").unwrap();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, m, None);
        let g = fwd.build_graph(&e).unwrap();
        let t = fwd.anchor();
        let p = fwd.sim(g.root, t).unwrap();
        let ce = fwd.tape.bce(p, &[true]).unwrap();
        let task = fwd.tape.mean(ce);
        let (total, _) = total_loss(&mut fwd, task, g.w_set, weights, None).unwrap();
        (fwd.tape.scalar(task), fwd.tape.scalar(total))
    }

    #[test]
    fn zero_weights_give_task_loss() {
        let m = model(8, 3);
        let (task, total) = total_with(&m, RegWeights::NONE);
        assert_eq!(task.to_bits(), total.to_bits());
    }

    #[test]
    fn total_increases_with_logic_weight() {
        let m = model(8, 3);
        let base = RegWeights {
            lambda_l: 1e-2,
            lambda_len: 1e-4,
            lambda_theta: 0.0,
        };
        let (_, a) = total_with(&m, base);
        let (_, b) = total_with(&m, RegWeights { lambda_l: 1e-1, ..base });
        assert!(b > a);
    }
}
