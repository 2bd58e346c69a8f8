//! Dynamic graph construction from expressions.
//!
//! Expressions are first laid out as a DAG of virtual nodes. Materializing the
//! DAG evaluates it level by level, so every module application at the same
//! depth across a whole batch runs as a single matrix product.

use std::collections::HashMap;

use super::model::{BinaryOp, Forward};
use crate::autodiff::{AutodiffError, NodeId};
use crate::logic::{Expr, VarId};

/// Handle to a virtual node in a [`GraphBuilder`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VRef(u32);

impl VRef {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VNode {
    Leaf(VarId),
    Not(VRef),
    Bin(BinaryOp, VRef, VRef),
}

#[derive(Debug, Default, Clone)]
pub struct GraphBuilder {
    nodes: Vec<VNode>,
    level: Vec<u32>,
    scope: HashMap<VarId, VRef>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Starts a new expression: leaves are shared only within a scope.
    pub fn new_scope(&mut self) {
        self.scope.clear();
    }

    fn push(&mut self, node: VNode, level: u32) -> VRef {
        self.nodes.push(node);
        self.level.push(level);
        VRef(self.nodes.len() as u32 - 1)
    }

    pub fn leaf(&mut self, v: VarId) -> VRef {
        if let Some(&r) = self.scope.get(&v) {
            return r;
        }
        let r = self.push(VNode::Leaf(v), 0);
        self.scope.insert(v, r);
        r
    }

    pub fn not(&mut self, a: VRef) -> VRef {
        let lvl = self.level[a.index()] + 1;
        self.push(VNode::Not(a), lvl)
    }

    pub fn binary(&mut self, op: BinaryOp, a: VRef, b: VRef) -> VRef {
        let lvl = self.level[a.index()].max(self.level[b.index()]) + 1;
        self.push(VNode::Bin(op, a, b), lvl)
    }

    pub fn and(&mut self, a: VRef, b: VRef) -> VRef {
        self.binary(BinaryOp::And, a, b)
    }

    pub fn or(&mut self, a: VRef, b: VRef) -> VRef {
        self.binary(BinaryOp::Or, a, b)
    }

    /// Adds `expr` in the current scope, left-folding n-ary operands in the
    /// order given.
    pub fn expr(&mut self, expr: &Expr) -> VRef {
        match expr {
            Expr::Var(v) => self.leaf(*v),
            Expr::Not(e) => {
                let a = self.expr(e);
                self.not(a)
            }
            Expr::And(xs) => self.fold(BinaryOp::And, xs),
            Expr::Or(xs) => self.fold(BinaryOp::Or, xs),
        }
    }

    fn fold(&mut self, op: BinaryOp, xs: &[Expr]) -> VRef {
        let mut acc = self.expr(&xs[0]);
        for x in &xs[1..] {
            let next = self.expr(x);
            acc = self.binary(op, acc, next);
        }
        acc
    }

    /// Evaluates every virtual node on the forward's tape.
    pub fn materialize(&self, fwd: &mut Forward<'_>) -> Result<Built, AutodiffError> {
        let mut loc = vec![(0u32, 0u32); self.nodes.len()];
        let mut sources: Vec<NodeId> = Vec::new();

        let leaves: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i], VNode::Leaf(_)))
            .collect();
        if !leaves.is_empty() {
            let vars: Vec<VarId> = leaves
                .iter()
                .map(|&i| match self.nodes[i] {
                    VNode::Leaf(v) => v,
                    _ => unreachable!(),
                })
                .collect();
            sources.push(fwd.embed(&vars)?);
            for (row, &i) in leaves.iter().enumerate() {
                loc[i] = (0, row as u32);
            }
        }

        let max_level = self.level.iter().copied().max().unwrap_or(0);
        let mut by_level: Vec<Vec<usize>> = vec![Vec::new(); max_level as usize + 1];
        for (i, &l) in self.level.iter().enumerate() {
            by_level[l as usize].push(i);
        }

        for members in by_level.iter().skip(1) {
            let mut nots = Vec::new();
            let mut ands = Vec::new();
            let mut ors = Vec::new();
            for &i in members {
                match self.nodes[i] {
                    VNode::Not(_) => nots.push(i),
                    VNode::Bin(BinaryOp::And, ..) => ands.push(i),
                    VNode::Bin(BinaryOp::Or, ..) => ors.push(i),
                    VNode::Leaf(_) => unreachable!("leaves live on level 0"),
                }
            }
            if !nots.is_empty() {
                let inputs: Vec<(u32, u32)> = nots
                    .iter()
                    .map(|&i| match self.nodes[i] {
                        VNode::Not(a) => loc[a.index()],
                        _ => unreachable!(),
                    })
                    .collect();
                let x = gather_from(fwd, &sources, &inputs)?;
                let out = fwd.not_mod(x)?;
                place(&mut sources, &mut loc, &nots, out);
            }
            for (op, group) in [(BinaryOp::And, &ands), (BinaryOp::Or, &ors)] {
                if group.is_empty() {
                    continue;
                }
                let (mut left, mut right) = (Vec::new(), Vec::new());
                for &i in group {
                    if let VNode::Bin(_, a, b) = self.nodes[i] {
                        left.push(loc[a.index()]);
                        right.push(loc[b.index()]);
                    }
                }
                let l = gather_from(fwd, &sources, &left)?;
                let r = gather_from(fwd, &sources, &right)?;
                let out = fwd.binary(op, l, r)?;
                place(&mut sources, &mut loc, group, out);
            }
        }
        Ok(Built { sources, loc })
    }
}

fn place(sources: &mut Vec<NodeId>, loc: &mut [(u32, u32)], members: &[usize], out: NodeId) {
    let src = sources.len() as u32;
    sources.push(out);
    for (row, &i) in members.iter().enumerate() {
        loc[i] = (src, row as u32);
    }
}

/// Gathers rows by `(source, row)` location, passing only the sources used.
fn gather_from(
    fwd: &mut Forward<'_>,
    sources: &[NodeId],
    picks: &[(u32, u32)],
) -> Result<NodeId, AutodiffError> {
    let mut used: Vec<u32> = picks.iter().map(|p| p.0).collect();
    used.sort_unstable();
    used.dedup();
    let remap: HashMap<u32, u32> = used.iter().enumerate().map(|(k, &s)| (s, k as u32)).collect();
    let srcs: Vec<NodeId> = used.iter().map(|&s| sources[s as usize]).collect();
    let picks: Vec<(u32, u32)> = picks.iter().map(|&(s, r)| (remap[&s], r)).collect();
    fwd.tape.gather(&srcs, &picks)
}

/// Tape locations of every virtual node after materialization.
#[derive(Debug, Clone)]
pub struct Built {
    sources: Vec<NodeId>,
    loc: Vec<(u32, u32)>,
}

impl Built {
    pub fn len(&self) -> usize {
        self.loc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loc.is_empty()
    }

    /// Stacks the vectors of `refs`, one row each.
    pub fn gather(&self, fwd: &mut Forward<'_>, refs: &[VRef]) -> Result<NodeId, AutodiffError> {
        let picks: Vec<(u32, u32)> = refs.iter().map(|r| self.loc[r.index()]).collect();
        gather_from(fwd, &self.sources, &picks)
    }

    /// Every virtual node's vector: the W-set of the batch.
    pub fn all(&self, fwd: &mut Forward<'_>) -> Result<NodeId, AutodiffError> {
        gather_from(fwd, &self.sources, &self.loc)
    }
}

/// Root vector and W-set of one or more expressions.
#[derive(Debug, Clone, Copy)]
pub struct GraphBuildResult {
    /// One row per expression.
    pub root: NodeId,
    /// Every leaf and module output, one row each.
    pub w_set: NodeId,
    pub w_count: usize,
}

impl Forward<'_> {
    /// Builds the graphs of `exprs` (operands in the order given) and returns
    /// their roots and the combined W-set.
    pub fn build_graphs(&mut self, exprs: &[Expr]) -> Result<GraphBuildResult, AutodiffError> {
        let mut g = GraphBuilder::new();
        let roots: Vec<VRef> = exprs
            .iter()
            .map(|e| {
                g.new_scope();
                g.expr(e)
            })
            .collect();
        let built = g.materialize(self)?;
        let root = built.gather(self, &roots)?;
        let w_set = built.all(self)?;
        Ok(GraphBuildResult {
            root,
            w_set,
            w_count: built.len(),
        })
    }

    pub fn build_graph(&mut self, expr: &Expr) -> Result<GraphBuildResult, AutodiffError> {
        self.build_graphs(std::slice::from_ref(expr))
    }
}
