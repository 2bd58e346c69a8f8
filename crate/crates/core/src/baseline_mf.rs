//! Biased matrix factorization baseline.
//!
//! `score(u, i) = μ + b_u + b_i + P_u · Q_i`, trained with the same session
//! machinery as the NLN: point-wise cross-entropy on `σ(score)` for preference
//! prediction, pair-wise loss on raw scores for top-K.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::rec::{NegSampler, RankTask};
use crate::regularizers::{RegReport, RegWeights};
use crate::rng::Rng;
use crate::training::{
    cross_entropy, pairwise_loss, BatchLoss, Objective, Split, SplitEval, TrainError, TrainRngs, Trainable,
};
use crate::training::{pointwise_eval, ranking_eval};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfModel {
    pub d: usize,
    pub store: ParamStore,
    pub mu: ParamId,
    pub b_user: ParamId,
    pub b_item: ParamId,
    pub p: ParamId,
    pub q: ParamId,
}

impl MfModel {
    /// Factors `N(0, 0.01²)`, biases zero.
    pub fn init(users: usize, items: usize, d: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let mut factors = |rows| Array2::from_shape_fn((rows, d), |_| 0.01 * rng.normal());
        let p_init = factors(users);
        let q_init = factors(items);
        MfModel {
            d,
            mu: store.add("mu", Array2::zeros((1, 1)), false),
            b_user: store.add("b_user", Array2::zeros((users, 1)), false),
            b_item: store.add("b_item", Array2::zeros((items, 1)), false),
            p: store.add("p", p_init, false),
            q: store.add("q", q_init, false),
            store,
        }
    }

    pub fn score(&self, user: u32, item: u32) -> f64 {
        let s = &self.store;
        let (u, i) = (user as usize, item as usize);
        s.value(self.mu)[[0, 0]]
            + s.value(self.b_user)[[u, 0]]
            + s.value(self.b_item)[[i, 0]]
            + s.value(self.p).row(u).dot(&s.value(self.q).row(i))
    }

    /// Scores of `(user, item)` pairs as an `n x 1` column on `tape`.
    pub fn score_nodes(&self, tape: &mut Tape, pairs: &[(u32, u32)]) -> Result<NodeId, TrainError> {
        let s = &self.store;
        let mu = tape.param(s, self.mu);
        let bu = tape.param(s, self.b_user);
        let bi = tape.param(s, self.b_item);
        let p = tape.param(s, self.p);
        let q = tape.param(s, self.q);
        let users: Vec<(u32, u32)> = pairs.iter().map(|&(u, _)| (0, u)).collect();
        let items: Vec<(u32, u32)> = pairs.iter().map(|&(_, i)| (0, i)).collect();
        let bu = tape.gather(&[bu], &users)?;
        let bi = tape.gather(&[bi], &items)?;
        let pu = tape.gather(&[p], &users)?;
        let qi = tape.gather(&[q], &items)?;
        let dot = tape.row_dot(pu, qi)?;
        let biases = tape.add(bu, bi)?;
        let sum = tape.add(biases, dot)?;
        Ok(tape.add_row(sum, mu)?)
    }

    fn all_params(&self, tape: &mut Tape) -> Vec<NodeId> {
        [self.mu, self.b_user, self.b_item, self.p, self.q]
            .into_iter()
            .map(|id| tape.param(&self.store, id))
            .collect()
    }

    fn l2(&self) -> f64 {
        self.store.iter().map(|(_, p)| p.value.iter().map(|v| v * v).sum::<f64>()).sum()
    }
}

impl Trainable for MfModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

fn with_l2(model: &MfModel, tape: &mut Tape, task: NodeId, weights: RegWeights) -> Result<NodeId, TrainError> {
    if weights.lambda_theta <= 0.0 {
        return Ok(task);
    }
    let params = model.all_params(tape);
    let l2 = crate::regularizers::param_reg(tape, &params)?;
    let scaled = tape.scale(l2, weights.lambda_theta);
    let both = tape.stack(&[task, scaled])?;
    Ok(tape.sum(both))
}

fn diag(model: &MfModel) -> RegReport {
    RegReport {
        param: model.l2(),
        ..RegReport::default()
    }
}

/// Preference prediction on `(user, item, liked)` triples.
pub struct MfPointwise {
    pub train: Vec<(u32, u32, bool)>,
    pub valid: Vec<(u32, u32, bool)>,
    pub test: Vec<(u32, u32, bool)>,
}

impl Objective<MfModel> for MfPointwise {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch_loss(
        &self,
        model: &MfModel,
        tape: &mut Tape,
        batch: &[usize],
        weights: RegWeights,
        _rngs: &mut TrainRngs,
    ) -> Result<BatchLoss, TrainError> {
        let pairs: Vec<(u32, u32)> = batch.iter().map(|&k| (self.train[k].0, self.train[k].1)).collect();
        let labels: Vec<bool> = batch.iter().map(|&k| self.train[k].2).collect();
        let s = model.score_nodes(tape, &pairs)?;
        let p = tape.sigmoid(s);
        let task = cross_entropy(tape, p, &labels)?;
        Ok(BatchLoss {
            loss: with_l2(model, tape, task, weights)?,
            skipped: 0,
        })
    }

    fn evaluate(&self, model: &MfModel, split: Split) -> Result<Option<SplitEval>, TrainError> {
        let data = match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        };
        if data.is_empty() {
            return Err(TrainError::Config(format!("empty {} split", split.name())));
        }
        let preds: Vec<f64> = data
            .iter()
            .map(|&(u, i, _)| crate::autodiff::stable_sigmoid(model.score(u, i)))
            .collect();
        let labels: Vec<bool> = data.iter().map(|t| t.2).collect();
        pointwise_eval(&preds, &labels).map(Some)
    }

    fn diagnostics(&self, model: &MfModel) -> Result<RegReport, TrainError> {
        Ok(diag(model))
    }
}

/// Top-K training on liked `(user, item)` pairs against sampled negatives.
pub struct MfPairwise {
    pub train: Vec<(u32, u32)>,
    pub sampler: NegSampler,
    pub valid: Vec<RankTask>,
    pub test: Vec<RankTask>,
}

impl MfPairwise {
    pub fn score_tasks(model: &MfModel, tasks: &[RankTask]) -> Vec<Vec<f64>> {
        tasks
            .iter()
            .map(|t| t.candidates.iter().map(|&c| model.score(t.user, c)).collect())
            .collect()
    }
}

impl Objective<MfModel> for MfPairwise {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch_loss(
        &self,
        model: &MfModel,
        tape: &mut Tape,
        batch: &[usize],
        weights: RegWeights,
        rngs: &mut TrainRngs,
    ) -> Result<BatchLoss, TrainError> {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for &k in batch {
            let (u, i) = self.train[k];
            if let Some(j) = self.sampler.sample(u, &mut rngs.negatives) {
                pos.push((u, i));
                neg.push((u, j));
            }
        }
        if pos.is_empty() {
            return Err(TrainError::Config("batch has no example with a negative to sample".into()));
        }
        let skipped = batch.len() - pos.len();
        let sp = model.score_nodes(tape, &pos)?;
        let sn = model.score_nodes(tape, &neg)?;
        let task = pairwise_loss(tape, sp, sn)?;
        Ok(BatchLoss {
            loss: with_l2(model, tape, task, weights)?,
            skipped,
        })
    }

    fn evaluate(&self, model: &MfModel, split: Split) -> Result<Option<SplitEval>, TrainError> {
        let tasks = match split {
            Split::Train => return Ok(None),
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        };
        ranking_eval(&Self::score_tasks(model, tasks)).map(Some)
    }

    fn diagnostics(&self, model: &MfModel) -> Result<RegReport, TrainError> {
        Ok(diag(model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::Expr;
    use crate::metrics::{auc, rank_candidates};
    use crate::rng::Stream;
    use crate::training::{train, Metric, TrainConfig};
    use std::collections::{HashMap, HashSet};

    fn model(users: usize, items: usize) -> MfModel {
        MfModel::init(users, items, 4, &mut Rng::new(1, Stream::Init))
    }

    #[test]
    fn score_closed_forms() {
        let mut m = model(2, 2);
        for id in [m.p, m.q] {
            m.store.value_mut(id).fill(0.0);
        }
        assert_eq!(m.score(0, 1), 0.0);
        m.store.value_mut(m.mu)[[0, 0]] = 0.1;
        m.store.value_mut(m.b_user)[[1, 0]] = 0.2;
        m.store.value_mut(m.b_item)[[0, 0]] = 0.3;
        assert!((m.score(1, 0) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn tape_score_matches_and_grad_is_other_factor() {
        let m = model(3, 4);
        let mut tape = Tape::new();
        let s = m.score_nodes(&mut tape, &[(2, 1)]).unwrap();
        assert!((tape.scalar(s) - m.score(2, 1)).abs() < 1e-12);
        tape.backward(s).unwrap();
        let grads: HashMap<_, _> = tape.param_grads().into_iter().collect();
        let gp = &grads[&m.p];
        assert_eq!(gp.row(2), m.store.value(m.q).row(1));
        assert!(gp.row(0).iter().all(|&g| g == 0.0));
    }

    fn separable() -> MfPointwise {
        // Users 0 and 1 like items 0 and 1 only; user 2 likes item 2 only.
        let mut all = Vec::new();
        for u in 0..3u32 {
            for i in 0..3u32 {
                all.push((u, i, (u < 2 && i < 2) || (u == 2 && i == 2)));
            }
        }
        MfPointwise {
            train: all.clone(),
            valid: all.clone(),
            test: all,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            batch_size: 4,
            max_epochs: 200,
            patience: 200,
            reg_weights: RegWeights::NONE,
            eval_metric: Metric::Auc,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn overfits_separable_data() {
        let obj = separable();
        let out = train(&obj, &tiny_cfg(), model(3, 3), 4).unwrap();
        let preds: Vec<f64> = obj.train.iter().map(|&(u, i, _)| out.model.score(u, i)).collect();
        let labels: Vec<bool> = obj.train.iter().map(|t| t.2).collect();
        assert_eq!(auc(&preds, &labels).unwrap(), 1.0);
    }

    #[test]
    fn same_seed_same_model() {
        let obj = separable();
        let cfg = TrainConfig {
            max_epochs: 5,
            ..tiny_cfg()
        };
        let a = train(&obj, &cfg, model(3, 3), 9).unwrap();
        let b = train(&obj, &cfg, model(3, 3), 9).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn user_shift_leaves_ranks() {
        let mut m = model(2, 200);
        let tasks: Vec<RankTask> = (0..2u32)
            .map(|u| RankTask {
                user: u,
                history: Expr::var(0),
                candidates: (0..101).map(|c| (c * 7 + u) % 200).collect(),
            })
            .collect();
        let before: Vec<_> = MfPairwise::score_tasks(&m, &tasks)
            .iter()
            .map(|s| rank_candidates(s, 0).unwrap())
            .collect();
        m.store.value_mut(m.b_user)[[0, 0]] += 3.7;
        m.store.value_mut(m.b_user)[[1, 0]] -= 1.2;
        let after: Vec<_> = MfPairwise::score_tasks(&m, &tasks)
            .iter()
            .map(|s| rank_candidates(s, 0).unwrap())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn pairwise_trains_and_skips_full_users() {
        let liked: HashMap<u32, HashSet<u32>> =
            HashMap::from([(0, HashSet::from([0, 1])), (1, (0..4).collect())]);
        let sampler = NegSampler::new(4, liked);
        let task = RankTask {
            user: 0,
            history: Expr::var(0),
            candidates: vec![0, 2, 3],
        };
        let obj = MfPairwise {
            train: vec![(0, 0), (0, 1), (1, 2)],
            sampler,
            valid: vec![task.clone()],
            test: vec![task],
        };
        let cfg = TrainConfig {
            max_epochs: 3,
            eval_metric: Metric::Ndcg10,
            ..tiny_cfg()
        };
        let out = train(&obj, &cfg, model(2, 4), 1).unwrap();
        assert!(out.stats[1].skipped >= 1);
    }
}
