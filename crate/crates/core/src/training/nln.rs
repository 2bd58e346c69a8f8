//! NLN objectives: point-wise on labeled expressions, pair-wise on
//! recommendation expressions.

use std::collections::BTreeMap;

use super::{cross_entropy, pairwise_loss, BatchLoss, Metric, Objective, Split, SplitEval, TrainError, TrainRngs};
use crate::autodiff::{stable_sigmoid, Tape, LOG_CLAMP};
use crate::logic::{shuffle_operands, Expr, LabeledExpr, VarId};
use crate::metrics::{accuracy, auc, ndcg_at_k, rank_candidates, rmse};
use crate::nln::{predict_all, Forward, GraphBuilder, NlnModel, VRef};
use crate::rec::{NegSampler, RankTask, RecDataset, RecError, SplitTag as RecSplit};
use crate::regularizers::{report_for, total_loss, RegReport, RegWeights};

/// Expressions evaluated per tape in evaluation mode.
const EVAL_CHUNK: usize = 512;
/// Training expressions used for the per-epoch regularizer diagnostics.
const DIAG_EXPRS: usize = 128;

/// Cross-entropy on expressions labeled true or false.
pub struct NlnPointwise {
    pub train: Vec<LabeledExpr>,
    pub valid: Vec<LabeledExpr>,
    pub test: Vec<LabeledExpr>,
}

impl NlnPointwise {
    pub fn new(train: Vec<LabeledExpr>, valid: Vec<LabeledExpr>, test: Vec<LabeledExpr>) -> Self {
        NlnPointwise { train, valid, test }
    }

    fn split(&self, s: Split) -> &[LabeledExpr] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

fn mean_bce(preds: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let q = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
            -if y { q.ln() } else { (1.0 - q).ln() }
        })
        .sum();
    total / preds.len().max(1) as f64
}

/// Loss and accuracy, RMSE and (when both classes occur) AUC.
pub fn pointwise_eval(preds: &[f64], labels: &[bool]) -> Result<SplitEval, TrainError> {
    let mut metrics = BTreeMap::new();
    metrics.insert(Metric::Accuracy, accuracy(preds, labels)?);
    metrics.insert(Metric::Rmse, rmse(preds, labels)?);
    if labels.iter().any(|&y| y) && labels.iter().any(|&y| !y) {
        metrics.insert(Metric::Auc, auc(preds, labels)?);
    }
    Ok(SplitEval {
        loss: mean_bce(preds, labels),
        metrics,
    })
}

impl Objective<NlnModel> for NlnPointwise {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch_loss(
        &self,
        model: &NlnModel,
        tape: &mut Tape,
        batch: &[usize],
        weights: RegWeights,
        rngs: &mut TrainRngs,
    ) -> Result<BatchLoss, TrainError> {
        let exprs: Vec<Expr> = batch
            .iter()
            .map(|&i| shuffle_operands(&self.train[i].expr, &mut rngs.shuffle))
            .collect();
        let labels: Vec<bool> = batch.iter().map(|&i| self.train[i].label).collect();
        let mut fwd = Forward::new(tape, model, Some(&mut rngs.dropout));
        let g = fwd.build_graphs(&exprs)?;
        let t = fwd.anchor();
        let (p, _) = fwd.sim_guarded(g.root, t)?;
        let task = cross_entropy(fwd.tape, p, &labels)?;
        let (loss, _) = total_loss(&mut fwd, task, g.w_set, weights, Some(&mut rngs.reg_dropout))?;
        Ok(BatchLoss { loss, skipped: 0 })
    }

    fn evaluate(&self, model: &NlnModel, split: Split) -> Result<Option<SplitEval>, TrainError> {
        let data = self.split(split);
        if data.is_empty() {
            return Err(TrainError::Config(format!("empty {} split", split.name())));
        }
        let exprs: Vec<Expr> = data.iter().map(|e| e.expr.clone()).collect();
        let labels: Vec<bool> = data.iter().map(|e| e.label).collect();
        let preds = predict_all(model, &exprs, EVAL_CHUNK)?;
        pointwise_eval(&preds, &labels).map(Some)
    }

    fn diagnostics(&self, model: &NlnModel) -> Result<RegReport, TrainError> {
        let exprs: Vec<Expr> = self.train.iter().take(DIAG_EXPRS).map(|e| e.expr.clone()).collect();
        Ok(report_for(model, &exprs)?)
    }

    fn validate(&self) -> Result<(), TrainError> {
        for s in Split::ALL {
            if self.split(s).is_empty() {
                return Err(TrainError::Config(format!("empty {} split", s.name())));
            }
        }
        Ok(())
    }
}

/// A positive interaction: history conjunction and the liked target.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub user: u32,
    pub history: Expr,
    pub target: VarId,
}

impl PairExample {
    /// One example per liked training target of `ds`.
    pub fn from_dataset(ds: &RecDataset) -> Result<Vec<PairExample>, RecError> {
        ds.positives(RecSplit::Train)
            .into_iter()
            .map(|r| {
                Ok(PairExample {
                    user: r.user,
                    history: r.history_expr(&ds.vars)?,
                    target: ds.vars.var(r.target)?,
                })
            })
            .collect()
    }
}

/// BPR-style loss: each positive against a freshly sampled negative target
/// that shares its history.
pub struct NlnPairwise {
    pub train: Vec<PairExample>,
    pub sampler: NegSampler,
    pub valid: Vec<RankTask>,
    pub test: Vec<RankTask>,
}

/// Adds `¬h ∨ t` for each target in `targets`, sharing `¬h`. Operand order
/// of the disjunction follows `swap`.
fn add_disjunctions(g: &mut GraphBuilder, history: &Expr, targets: &[VarId], swap: bool) -> Vec<VRef> {
    g.new_scope();
    let h = g.expr(history);
    let nh = g.not(h);
    targets
        .iter()
        .map(|&t| {
            let leaf = g.leaf(t);
            if swap {
                g.or(leaf, nh)
            } else {
                g.or(nh, leaf)
            }
        })
        .collect()
}

impl NlnPairwise {
    fn tasks(&self, s: Split) -> Option<&[RankTask]> {
        match s {
            Split::Train => None,
            Split::Valid => Some(&self.valid),
            Split::Test => Some(&self.test),
        }
    }

    /// Scores of every candidate of every task, evaluation mode.
    pub fn score_tasks(model: &NlnModel, tasks: &[RankTask]) -> Result<Vec<Vec<f64>>, TrainError> {
        let mut out = Vec::with_capacity(tasks.len());
        let per_tape = (EVAL_CHUNK / 101).max(1) * 4;
        for chunk in tasks.chunks(per_tape) {
            let mut tape = Tape::new();
            let mut fwd = Forward::new(&mut tape, model, None);
            let mut g = GraphBuilder::new();
            let roots: Vec<Vec<VRef>> = chunk
                .iter()
                .map(|task| {
                    let targets: Vec<VarId> = task.candidates.iter().map(|&c| VarId(c)).collect();
                    add_disjunctions(&mut g, &task.history, &targets, false)
                })
                .collect();
            let built = g.materialize(&mut fwd)?;
            let flat: Vec<VRef> = roots.iter().flatten().copied().collect();
            let root = built.gather(&mut fwd, &flat)?;
            let t = fwd.anchor();
            let (p, _) = fwd.sim_guarded(root, t)?;
            let scores = fwd.tape.value(p).column(0).to_vec();
            let mut at = 0;
            for r in &roots {
                out.push(scores[at..at + r.len()].to_vec());
                at += r.len();
            }
        }
        Ok(out)
    }
}

/// Mean pairwise loss of positive vs each negative, and mean nDCG@10.
pub fn ranking_eval(scores: &[Vec<f64>]) -> Result<SplitEval, TrainError> {
    if scores.is_empty() {
        return Err(TrainError::Config("no ranking cases".into()));
    }
    let (mut loss, mut pairs, mut ndcg) = (0.0, 0usize, 0.0);
    for s in scores {
        let rank = rank_candidates(s, 0)?;
        ndcg += ndcg_at_k(rank, 10);
        for &neg in &s[1..] {
            loss += -stable_sigmoid(s[0] - neg).max(LOG_CLAMP).ln();
            pairs += 1;
        }
    }
    Ok(SplitEval {
        loss: loss / pairs.max(1) as f64,
        metrics: BTreeMap::from([(Metric::Ndcg10, ndcg / scores.len() as f64)]),
    })
}

impl Objective<NlnModel> for NlnPairwise {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch_loss(
        &self,
        model: &NlnModel,
        tape: &mut Tape,
        batch: &[usize],
        weights: RegWeights,
        rngs: &mut TrainRngs,
    ) -> Result<BatchLoss, TrainError> {
        let mut g = GraphBuilder::new();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        let mut skipped = 0;
        for &i in batch {
            let ex = &self.train[i];
            let Some(v_neg) = self.sampler.sample(ex.user, &mut rngs.negatives) else {
                skipped += 1;
                continue;
            };
            let history = shuffle_operands(&ex.history, &mut rngs.shuffle);
            let swap = rngs.shuffle.coin();
            let roots = add_disjunctions(&mut g, &history, &[ex.target, VarId(v_neg)], swap);
            pos.push(roots[0]);
            neg.push(roots[1]);
        }
        if pos.is_empty() {
            return Err(TrainError::Config("batch has no example with a negative to sample".into()));
        }
        let mut fwd = Forward::new(tape, model, Some(&mut rngs.dropout));
        let built = g.materialize(&mut fwd)?;
        let t = fwd.anchor();
        let rp = built.gather(&mut fwd, &pos)?;
        let rn = built.gather(&mut fwd, &neg)?;
        let (pp, _) = fwd.sim_guarded(rp, t)?;
        let (pn, _) = fwd.sim_guarded(rn, t)?;
        let task = pairwise_loss(fwd.tape, pp, pn)?;
        let w_set = built.all(&mut fwd)?;
        let (loss, _) = total_loss(&mut fwd, task, w_set, weights, Some(&mut rngs.reg_dropout))?;
        Ok(BatchLoss { loss, skipped })
    }

    fn evaluate(&self, model: &NlnModel, split: Split) -> Result<Option<SplitEval>, TrainError> {
        match self.tasks(split) {
            None => Ok(None),
            Some(tasks) => ranking_eval(&Self::score_tasks(model, tasks)?).map(Some),
        }
    }

    fn diagnostics(&self, model: &NlnModel) -> Result<RegReport, TrainError> {
        let exprs: Vec<Expr> = self
            .train
            .iter()
            .take(DIAG_EXPRS)
            .map(|e| Expr::Or(vec![Expr::not(e.history.clone()), Expr::Var(e.target)]))
            .collect();
        Ok(report_for(model, &exprs)?)
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.train.is_empty() || self.valid.is_empty() || self.test.is_empty() {
            return Err(TrainError::Config("pairwise training needs nonempty train, valid and test sets".into()));
        }
        Ok(())
    }
}
