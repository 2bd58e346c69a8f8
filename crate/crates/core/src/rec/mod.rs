//! Rating data to logic expressions.
//!
//! Each user's interactions, in time order, become one expression per
//! interaction after the first: `¬(h₁ ∧ … ∧ hₖ) ∨ target`, where the history
//! literals are the (up to ten) interactions right before the target, negated
//! when the user disliked the item.

mod load;
pub mod synth;

pub use load::{load_ratings, parse_ratings, write_id_map, LoadedRatings, RatingFormat};

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{Expr, LabeledExpr, VarId};
use crate::rng::Rng;

pub const MAX_HISTORY: usize = 10;
/// Expressions whose target is among a user's first five interactions always train.
pub const FORCED_TRAIN: usize = 5;

#[derive(Debug, Error)]
pub enum RecError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("item {0} has no variable")]
    UnmappedItem(u32),
    #[error("user {user} has {pool} candidate negatives, fewer than the {k} requested; reduce k")]
    PoolTooSmall { user: u32, pool: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    /// 1 to 5.
    pub rating: u8,
    pub timestamp: i64,
}

/// Ratings of 4 and above are likes.
pub fn binarize(rating: u8) -> bool {
    rating >= 4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecExpr {
    pub user: u32,
    /// Preceding interactions, oldest first.
    pub history: Vec<(u32, bool)>,
    pub target: u32,
    pub label: bool,
    /// 1-based position of the target in the user's timeline.
    pub position: usize,
}

impl RecExpr {
    /// The conjunction of history literals (a bare literal for one item).
    pub fn history_expr(&self, vars: &ItemVars) -> Result<Expr, RecError> {
        let lits = self
            .history
            .iter()
            .map(|&(item, liked)| Ok(Expr::literal(vars.var(item)?, liked)))
            .collect::<Result<Vec<_>, RecError>>()?;
        Ok(Expr::and(lits))
    }
}

/// `¬(h₁ ∧ …) ∨ target`; single-literal histories skip the conjunction.
pub fn to_expr_node(r: &RecExpr, vars: &ItemVars) -> Result<Expr, RecError> {
    let hist = r.history_expr(vars)?;
    Ok(Expr::Or(vec![Expr::not(hist), Expr::Var(vars.var(r.target)?)]))
}

/// Expressions of one user's time-ordered interactions.
pub fn build_expressions(timeline: &[Interaction], max_hist: usize) -> Vec<RecExpr> {
    (1..timeline.len())
        .map(|k| {
            let start = k.saturating_sub(max_hist);
            RecExpr {
                user: timeline[k].user,
                history: timeline[start..k]
                    .iter()
                    .map(|x| (x.item, binarize(x.rating)))
                    .collect(),
                target: timeline[k].item,
                label: binarize(timeline[k].rating),
                position: k + 1,
            }
        })
        .collect()
}

/// Dense item ids mapped to embedding rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemVars {
    map: HashMap<u32, VarId>,
}

impl ItemVars {
    /// Variables assigned in ascending item order.
    pub fn new(items: impl IntoIterator<Item = u32>) -> Self {
        let mut sorted: Vec<u32> = items.into_iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        let map = sorted
            .into_iter()
            .enumerate()
            .map(|(i, item)| (item, VarId(i as u32)))
            .collect();
        ItemVars { map }
    }

    pub fn var(&self, item: u32) -> Result<VarId, RecError> {
        self.map.get(&item).copied().ok_or(RecError::UnmappedItem(item))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

/// Split tags for one user's expressions (ordered by target position).
/// Targets in the first five interactions train; of the rest, the last goes
/// to test, the one before to validation, and anything earlier trains.
pub fn split_user(exprs: &[RecExpr]) -> Vec<SplitTag> {
    let mut tags = vec![SplitTag::Train; exprs.len()];
    let free: Vec<usize> = (0..exprs.len())
        .filter(|&i| exprs[i].position > FORCED_TRAIN)
        .collect();
    if let Some(&last) = free.last() {
        tags[last] = SplitTag::Test;
    }
    if free.len() >= 2 {
        tags[free[free.len() - 2]] = SplitTag::Valid;
    }
    tags
}

/// Split tags for every user's expressions.
pub fn split_rec(per_user: &[Vec<RecExpr>]) -> Vec<Vec<SplitTag>> {
    per_user.iter().map(|u| split_user(u)).collect()
}

/// Uniform negatives: any item the user has not liked.
#[derive(Debug, Clone)]
pub struct NegSampler {
    n_items: u32,
    liked: HashMap<u32, HashSet<u32>>,
}

impl NegSampler {
    /// Items are dense `0..n_items`.
    pub fn new(n_items: u32, liked: HashMap<u32, HashSet<u32>>) -> Self {
        NegSampler { n_items, liked }
    }

    fn liked_of(&self, user: u32) -> Option<&HashSet<u32>> {
        self.liked.get(&user)
    }

    pub fn pool_size(&self, user: u32) -> usize {
        self.n_items as usize - self.liked_of(user).map_or(0, |s| s.len())
    }

    pub fn is_liked(&self, user: u32, item: u32) -> bool {
        self.liked_of(user).is_some_and(|s| s.contains(&item))
    }

    /// `None` when the user has liked every item.
    pub fn sample(&self, user: u32, rng: &mut Rng) -> Option<u32> {
        let pool = self.pool_size(user);
        if pool == 0 {
            return None;
        }
        // Rejection is cheap while most items are candidates.
        if pool * 4 >= self.n_items as usize {
            loop {
                let item = rng.below(self.n_items as usize) as u32;
                if !self.is_liked(user, item) {
                    return Some(item);
                }
            }
        }
        let k = rng.below(pool);
        (0..self.n_items).filter(|&i| !self.is_liked(user, i)).nth(k)
    }

    /// `k` distinct negatives.
    pub fn sample_distinct(&self, user: u32, k: usize, rng: &mut Rng) -> Result<Vec<u32>, RecError> {
        let pool = self.pool_size(user);
        if pool < k {
            return Err(RecError::PoolTooSmall { user, pool, k });
        }
        let candidates: Vec<u32> = (0..self.n_items).filter(|&i| !self.is_liked(user, i)).collect();
        Ok(rng
            .sample_distinct(candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect())
    }
}

/// A leave-one-out ranking case: the positive is `candidates[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTask {
    pub user: u32,
    pub history: Expr,
    pub candidates: Vec<u32>,
}

impl RankTask {
    pub fn positive(&self) -> u32 {
        self.candidates[0]
    }
}

/// The positive plus `k` sampled negatives, all sharing the positive's history.
pub fn leave_one_out_candidates(
    positive: &RecExpr,
    vars: &ItemVars,
    k: usize,
    sampler: &NegSampler,
    rng: &mut Rng,
) -> Result<RankTask, RecError> {
    let mut candidates = vec![positive.target];
    candidates.extend(sampler.sample_distinct(positive.user, k, rng)?);
    Ok(RankTask {
        user: positive.user,
        history: positive.history_expr(vars)?,
        candidates,
    })
}

/// Users and items remapped to dense ids, deduplicated, sorted by time.
#[derive(Debug, Clone)]
pub struct RecDataset {
    pub n_users: u32,
    pub n_items: u32,
    pub vars: ItemVars,
    /// Expressions per dense user, ordered by target position.
    pub per_user: Vec<Vec<RecExpr>>,
    pub tags: Vec<Vec<SplitTag>>,
    pub liked: HashMap<u32, HashSet<u32>>,
    /// Items never seen in a training expression.
    pub cold_items: usize,
    /// Repeat (user, item) ratings dropped in favour of the latest.
    pub duplicates: usize,
}

impl RecDataset {
    pub fn build(interactions: &[Interaction], max_hist: usize) -> Self {
        let users: BTreeMap<u32, u32> = dense(interactions.iter().map(|x| x.user));
        let items: BTreeMap<u32, u32> = dense(interactions.iter().map(|x| x.item));
        let mut timelines: Vec<Vec<(usize, Interaction)>> = vec![Vec::new(); users.len()];
        for (order, x) in interactions.iter().enumerate() {
            let u = users[&x.user];
            timelines[u as usize].push((
                order,
                Interaction {
                    user: u,
                    item: items[&x.item],
                    ..*x
                },
            ));
        }
        let mut duplicates = 0;
        let mut liked: HashMap<u32, HashSet<u32>> = HashMap::new();
        let per_user: Vec<Vec<RecExpr>> = timelines
            .into_iter()
            .map(|mut tl| {
                tl.sort_by_key(|&(order, x)| (x.timestamp, order));
                // Latest rating per item wins, placed at its latest time.
                let mut last: HashMap<u32, usize> = HashMap::new();
                for (i, (_, x)) in tl.iter().enumerate() {
                    last.insert(x.item, i);
                }
                duplicates += tl.len() - last.len();
                let kept: Vec<Interaction> = tl
                    .iter()
                    .enumerate()
                    .filter(|(i, (_, x))| last[&x.item] == *i)
                    .map(|(_, &(_, x))| x)
                    .collect();
                for x in &kept {
                    if binarize(x.rating) {
                        liked.entry(x.user).or_default().insert(x.item);
                    }
                }
                build_expressions(&kept, max_hist)
            })
            .collect();
        let tags = split_rec(&per_user);
        let n_items = items.len() as u32;
        let vars = ItemVars::new(0..n_items);
        let mut seen = HashSet::new();
        for (exprs, tags) in per_user.iter().zip(&tags) {
            for (e, t) in exprs.iter().zip(tags) {
                if *t == SplitTag::Train {
                    seen.insert(e.target);
                    seen.extend(e.history.iter().map(|h| h.0));
                }
            }
        }
        RecDataset {
            n_users: users.len() as u32,
            n_items,
            vars,
            per_user,
            tags,
            liked,
            cold_items: n_items as usize - seen.len(),
            duplicates,
        }
    }

    pub fn split(&self, tag: SplitTag) -> Vec<&RecExpr> {
        self.per_user
            .iter()
            .zip(&self.tags)
            .flat_map(|(es, ts)| es.iter().zip(ts).filter(|(_, t)| **t == tag).map(|(e, _)| e))
            .collect()
    }

    pub fn labeled(&self, tag: SplitTag) -> Result<Vec<LabeledExpr>, RecError> {
        self.split(tag)
            .into_iter()
            .map(|r| {
                Ok(LabeledExpr {
                    expr: to_expr_node(r, &self.vars)?,
                    label: r.label,
                })
            })
            .collect()
    }

    /// `(user, item, liked)` for the point-wise baseline.
    pub fn triples(&self, tag: SplitTag) -> Vec<(u32, u32, bool)> {
        self.split(tag).iter().map(|r| (r.user, r.target, r.label)).collect()
    }

    /// Liked targets of `tag`, the positives of pair-wise training.
    pub fn positives(&self, tag: SplitTag) -> Vec<&RecExpr> {
        self.split(tag).into_iter().filter(|r| r.label).collect()
    }

    pub fn sampler(&self) -> NegSampler {
        NegSampler::new(self.n_items, self.liked.clone())
    }

    /// Leave-one-out tasks for the positive expressions of `tag`.
    pub fn rank_tasks(&self, tag: SplitTag, k: usize, rng: &mut Rng) -> Result<Vec<RankTask>, RecError> {
        let sampler = self.sampler();
        self.split(tag)
            .into_iter()
            .filter(|r| r.label)
            .map(|r| leave_one_out_candidates(r, &self.vars, k, &sampler, rng))
            .collect()
    }

    /// Keeps only the first `n` users (by dense id).
    pub fn first_users(interactions: &[Interaction], n: usize) -> Vec<Interaction> {
        let keep: HashSet<u32> = dense(interactions.iter().map(|x| x.user))
            .into_iter()
            .filter(|&(_, d)| (d as usize) < n)
            .map(|(u, _)| u)
            .collect();
        interactions.iter().filter(|x| keep.contains(&x.user)).copied().collect()
    }
}

fn dense(ids: impl Iterator<Item = u32>) -> BTreeMap<u32, u32> {
    let set: std::collections::BTreeSet<u32> = ids.collect();
    set.into_iter().enumerate().map(|(i, id)| (id, i as u32)).collect()
}
