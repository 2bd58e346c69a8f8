use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, NodeId, ParamId, ParamStore, Tape};
use crate::logic::VarId;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlnConfig {
    /// Embedding dimension.
    pub d: usize,
    /// Scale applied to the cosine before the sigmoid in `Sim`.
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for NlnConfig {
    fn default() -> Self {
        NlnConfig {
            d: 64,
            alpha: 10.0,
            dropout: 0.2,
        }
    }
}

impl NlnConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d < 2 {
            return Err(format!("embedding dimension must be >= 2, got {}", self.d));
        }
        if !(self.alpha > 0.0) {
            return Err(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Parameter handles of one two-layer module: `H2 · relu(H1 · x + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleIds {
    pub h1: ParamId,
    pub h2: ParamId,
    pub b: ParamId,
}

/// The AND/OR/NOT modules, variable embeddings and the frozen true anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlnModel {
    pub cfg: NlnConfig,
    pub store: ParamStore,
    pub and: ModuleIds,
    pub or: ModuleIds,
    pub not: ModuleIds,
    pub embeddings: ParamId,
    pub anchor: ParamId,
}

fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| (2.0 * rng.uniform() - 1.0) * limit)
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.normal() * std)
}

impl NlnModel {
    /// Glorot-uniform module weights, zero biases, `N(0, 0.1²)` embeddings and a
    /// `N(0, 1/d)` anchor that is frozen for the model's lifetime.
    pub fn init(cfg: NlnConfig, vocab: usize, rng: &mut Rng) -> Self {
        let d = cfg.d;
        let mut store = ParamStore::new();
        let module = |name: &str, fan: usize, store: &mut ParamStore, rng: &mut Rng| ModuleIds {
            h1: store.add(format!("{name}.h1"), glorot(d, fan, rng), false),
            h2: store.add(format!("{name}.h2"), glorot(d, d, rng), false),
            b: store.add(format!("{name}.b"), Array2::zeros((1, d)), false),
        };
        let and = module("and", 2 * d, &mut store, rng);
        let or = module("or", 2 * d, &mut store, rng);
        let not = module("not", d, &mut store, rng);
        let embeddings = store.add("embeddings", normal(vocab, d, 0.1, rng), false);
        let anchor = store.add("anchor", normal(1, d, 1.0 / (d as f64).sqrt(), rng), true);
        NlnModel {
            cfg,
            store,
            and,
            or,
            not,
            embeddings,
            anchor,
        }
    }

    pub fn vocab(&self) -> usize {
        self.store.value(self.embeddings).nrows()
    }

    pub fn embedding_table(&self) -> &Array2<f64> {
        self.store.value(self.embeddings)
    }

    pub fn anchor_vec(&self) -> &Array2<f64> {
        self.store.value(self.anchor)
    }

    /// Module parameters only, the set penalized by the ℓ2 term.
    pub fn module_params(&self) -> [ParamId; 9] {
        let (a, o, n) = (self.and, self.or, self.not);
        [a.h1, a.h2, a.b, o.h1, o.h2, o.b, n.h1, n.h2, n.b]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundModule {
    pub h1: NodeId,
    pub h2: NodeId,
    pub b: NodeId,
}

/// A model's parameters placed on one tape.
#[derive(Debug, Clone, Copy)]
pub struct Bound {
    pub and: BoundModule,
    pub or: BoundModule,
    pub not: BoundModule,
    pub embeddings: NodeId,
    pub anchor: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    And,
    Or,
}

/// One forward pass over a tape. Holding a dropout generator means training
/// mode; `None` means evaluation mode (no dropout).
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub model: &'a NlnModel,
    pub bound: Bound,
    dropout: Option<&'a mut Rng>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, model: &'a NlnModel, dropout: Option<&'a mut Rng>) -> Self {
        let store = &model.store;
        let bind = |m: ModuleIds, tape: &mut Tape| BoundModule {
            h1: tape.param(store, m.h1),
            h2: tape.param(store, m.h2),
            b: tape.param(store, m.b),
        };
        let bound = Bound {
            and: bind(model.and, tape),
            or: bind(model.or, tape),
            not: bind(model.not, tape),
            embeddings: tape.param(store, model.embeddings),
            anchor: tape.param(store, model.anchor),
        };
        Forward {
            tape,
            model,
            bound,
            dropout,
        }
    }

    pub fn training(&self) -> bool {
        self.dropout.is_some()
    }

    /// Replaces the dropout generator, returning the previous one.
    pub fn swap_dropout(&mut self, rng: Option<&'a mut Rng>) -> Option<&'a mut Rng> {
        std::mem::replace(&mut self.dropout, rng)
    }

    pub fn d(&self) -> usize {
        self.model.cfg.d
    }

    pub fn module(&self, op: BinaryOp) -> BoundModule {
        match op {
            BinaryOp::And => self.bound.and,
            BinaryOp::Or => self.bound.or,
        }
    }

    /// `relu` then dropout (training only).
    pub fn activate(&mut self, pre: NodeId) -> NodeId {
        let h = self.tape.relu(pre);
        match self.dropout.as_deref_mut() {
            Some(rng) => self.tape.dropout(h, self.model.cfg.dropout, true, rng),
            None => h,
        }
    }

    /// Row-wise `H2 · f(H1 · (wi | wj) + b)`.
    pub fn binary(&mut self, op: BinaryOp, wi: NodeId, wj: NodeId) -> Result<NodeId, AutodiffError> {
        let m = self.module(op);
        let x = self.tape.concat(wi, wj)?;
        let pre = self.tape.affine(m.h1, x, m.b)?;
        let h = self.activate(pre);
        self.tape.matmul_t(h, m.h2)
    }

    pub fn and_mod(&mut self, wi: NodeId, wj: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(BinaryOp::And, wi, wj)
    }

    pub fn or_mod(&mut self, wi: NodeId, wj: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(BinaryOp::Or, wi, wj)
    }

    pub fn not_mod(&mut self, w: NodeId) -> Result<NodeId, AutodiffError> {
        let m = self.bound.not;
        let pre = self.tape.affine(m.h1, w, m.b)?;
        let h = self.activate(pre);
        self.tape.matmul_t(h, m.h2)
    }

    /// Row-wise `sigmoid(α · cos(wi, wj))`; `wj` may be one broadcast row.
    pub fn sim(&mut self, wi: NodeId, wj: NodeId) -> Result<NodeId, AutodiffError> {
        let c = self.tape.cosine(wi, wj)?;
        Ok(self.scaled_sigmoid(c))
    }

    /// Like [`Forward::sim`] but degenerate rows give 0.5 with zero gradient.
    pub fn sim_guarded(&mut self, wi: NodeId, wj: NodeId) -> Result<(NodeId, usize), AutodiffError> {
        let (c, n) = self.tape.cosine_guarded(wi, wj)?;
        Ok((self.scaled_sigmoid(c), n))
    }

    fn scaled_sigmoid(&mut self, c: NodeId) -> NodeId {
        let z = self.tape.scale(c, self.model.cfg.alpha);
        self.tape.sigmoid(z)
    }

    pub fn anchor(&self) -> NodeId {
        self.bound.anchor
    }

    /// `F = NOT(T)` through the current NOT parameters.
    pub fn false_vec(&mut self) -> Result<NodeId, AutodiffError> {
        self.not_mod(self.bound.anchor)
    }

    /// Embedding rows for `vars`, one output row per entry.
    pub fn embed(&mut self, vars: &[VarId]) -> Result<NodeId, AutodiffError> {
        let vocab = self.model.vocab();
        if let Some(v) = vars.iter().find(|v| v.index() >= vocab) {
            return Err(AutodiffError::Contract(format!(
                "unknown variable v{} (vocabulary {vocab})",
                v.0
            )));
        }
        let picks: Vec<(u32, u32)> = vars.iter().map(|v| (0, v.0)).collect();
        self.tape.gather(&[self.bound.embeddings], &picks)
    }
}
