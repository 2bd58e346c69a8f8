use ndarray::{s, Array2, Axis};
use thiserror::Error;

use super::params::{ParamId, ParamStore};
use crate::rng::Rng;

/// Norms below this are treated as degenerate by the cosine primitives.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Log arguments are clamped into `[LOG_CLAMP, 1 - LOG_CLAMP]`.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("degenerate vector in {op}: row {row} has norm below {DEGENERATE_NORM:e}")]
    Degenerate { op: &'static str, row: usize },
    #[error("backward root must be a 1x1 scalar, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x · wᵀ (+ b)`
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `x + row`, row broadcast over every row of x.
    AddRow {
        x: NodeId,
        row: NodeId,
    },
    ScaleShift {
        x: NodeId,
        scale: f64,
    },
    ConcatCols(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    /// Rows picked from several sources, `(source index, row)` per output row.
    Gather {
        sources: Vec<NodeId>,
        picks: Vec<(u32, u32)>,
    },
    Relu(NodeId),
    Dropout {
        x: NodeId,
        mask: Array2<f64>,
    },
    Sigmoid(NodeId),
    Softplus(NodeId),
    /// Row-wise cosine; `b` may be a single row broadcast against `a`.
    RowCosine {
        a: NodeId,
        b: NodeId,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
        degenerate: Vec<bool>,
    },
    RowDot(NodeId, NodeId),
    SumSq(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Per-row binary cross-entropy against fixed 0/1 labels.
    Bce {
        p: NodeId,
        labels: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::ConcatCols(a, b) | Op::RowDot(a, b) => {
                vec![*a, *b]
            }
            Op::AddRow { x, row } => vec![*x, *row],
            Op::RowCosine { a, b, .. } => vec![*a, *b],
            Op::ScaleShift { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Dropout { x, .. }
            | Op::Bce { p: x, .. } => vec![*x],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::SumSq(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Gather { sources, .. } => sources.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
}

/// Append-only record of a computation, replayed in reverse by [`Tape::backward`].
///
/// Every value is a dense row-major matrix; a vector is a `1 x n` matrix and a
/// batch of vectors stacks one per row.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeId)>,
}

/// `1 / (1 + e^-x)`, branching on sign so large magnitudes stay finite.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    /// Accumulated gradient, zeros if nothing has flowed into the node.
    pub fn grad(&self, id: NodeId) -> Array2<f64> {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Array2::zeros(node.value.dim()))
    }

    /// Input node ids of `id`, all strictly smaller than `id`.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn vector(&mut self, values: &[f64]) -> NodeId {
        let v = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row vector");
        self.leaf(v)
    }

    pub fn scalar_leaf(&mut self, x: f64) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    /// Places a parameter on the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.params.iter().find(|(p, _)| *p == id) {
            return node;
        }
        let node = self.leaf(store.value(id).clone());
        self.params.push((id, node));
        node
    }

    /// Gradients of every parameter placed on this tape, after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Array2<f64>)> {
        self.params.iter().map(|&(p, n)| (p, self.grad(n))).collect()
    }

    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.affine_impl(w, x, None)
    }

    /// `W · x + b` for each row `x`, i.e. `X · Wᵀ + b`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.affine_impl(w, x, Some(b))
    }

    fn affine_impl(&mut self, w: NodeId, x: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.1 != ws.1 {
            return Err(AutodiffError::Shape {
                op: "affine",
                left: ws,
                right: xs,
            });
        }
        let mut out = self.value(x).dot(&self.value(w).t());
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != (1, ws.0) {
                return Err(AutodiffError::Shape {
                    op: "affine bias",
                    left: ws,
                    right: bs,
                });
            }
            out += &self.value(b).row(0);
        }
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xs, rs) = (self.shape(x), self.shape(row));
        if rs != (1, xs.1) {
            return Err(AutodiffError::Shape {
                op: "add_row",
                left: xs,
                right: rs,
            });
        }
        let out = self.value(x) + &self.value(row).row(0);
        Ok(self.push(out, Op::AddRow { x, row }))
    }

    /// `scale * x + shift`, elementwise.
    pub fn scale_shift(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let out = self.value(x).mapv(|v| scale * v + shift);
        self.push(out, Op::ScaleShift { x, scale })
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> NodeId {
        self.scale_shift(x, scale, 0.0)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(AutodiffError::Shape {
                op: "concat",
                left: sa,
                right: sb,
            });
        }
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts checked");
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        if start > end || end > xs.1 {
            return Err(AutodiffError::Contract(format!(
                "column slice {start}..{end} out of bounds for {xs:?}"
            )));
        }
        let out = self.value(x).slice(s![.., start..end]).to_owned();
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    /// Stacks rows picked from `sources`; a row may be picked more than once.
    pub fn gather(&mut self, sources: &[NodeId], picks: &[(u32, u32)]) -> Result<NodeId> {
        let cols = match sources.first() {
            Some(&s) => self.shape(s).1,
            None => return Err(AutodiffError::Contract("gather without sources".into())),
        };
        for &s in sources {
            if self.shape(s).1 != cols {
                return Err(AutodiffError::Shape {
                    op: "gather",
                    left: self.shape(sources[0]),
                    right: self.shape(s),
                });
            }
        }
        let mut out = Array2::zeros((picks.len(), cols));
        for (k, &(src, row)) in picks.iter().enumerate() {
            let source = sources.get(src as usize).ok_or_else(|| {
                AutodiffError::Contract(format!("gather source {src} out of range"))
            })?;
            let value = &self.nodes[source.0].value;
            if row as usize >= value.nrows() {
                return Err(AutodiffError::Contract(format!(
                    "gather row {row} out of range for {:?}",
                    value.dim()
                )));
            }
            out.row_mut(k).assign(&value.row(row as usize));
        }
        Ok(self.push(
            out,
            Op::Gather {
                sources: sources.to_vec(),
                picks: picks.to_vec(),
            },
        ))
    }

    /// Rows of a single node.
    pub fn rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let picks: Vec<(u32, u32)> = rows.iter().map(|&r| (0, r as u32)).collect();
        self.gather(&[x], &picks)
    }

    /// Vertical stack of whole nodes.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut picks = Vec::new();
        for (i, &p) in parts.iter().enumerate() {
            picks.extend((0..self.shape(p).0).map(|r| (i as u32, r as u32)));
        }
        self.gather(parts, &picks)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`; identity when
    /// not training or when `rate == 0`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, training: bool, rng: &mut Rng) -> NodeId {
        if !training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = self
            .value(x)
            .mapv(|_| if rng.uniform() < rate { 0.0 } else { keep });
        let out = self.value(x) * &mask;
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(stable_sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// `ln(1 + eˣ)`, so `-ln σ(z) = softplus(-z)`.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(softplus_f);
        self.push(out, Op::Softplus(x))
    }

    /// Row-wise cosine similarity; errors on a degenerate row.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (node, degenerate) = self.cosine_impl(a, b)?;
        if let Some(row) = degenerate {
            return Err(AutodiffError::Degenerate { op: "cosine", row });
        }
        Ok(node)
    }

    /// Row-wise cosine where degenerate rows yield 0 with zero gradient.
    /// Returns the node and the number of degenerate rows.
    pub fn cosine_guarded(&mut self, a: NodeId, b: NodeId) -> Result<(NodeId, usize)> {
        let (node, _) = self.cosine_impl(a, b)?;
        let count = match &self.nodes[node.0].op {
            Op::RowCosine { degenerate, .. } => degenerate.iter().filter(|&&d| d).count(),
            _ => unreachable!(),
        };
        Ok((node, count))
    }

    fn cosine_impl(&mut self, a: NodeId, b: NodeId) -> Result<(NodeId, Option<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 || !(sb.0 == sa.0 || sb.0 == 1) {
            return Err(AutodiffError::Shape {
                op: "cosine",
                left: sa,
                right: sb,
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let norms_a: Vec<f64> = av.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let norms_b: Vec<f64> = bv.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut out = Array2::zeros((sa.0, 1));
        let mut degenerate = vec![false; sa.0];
        let mut first = None;
        for i in 0..sa.0 {
            let j = if sb.0 == 1 { 0 } else { i };
            let (na, nb) = (norms_a[i], norms_b[j]);
            if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
                degenerate[i] = true;
                first.get_or_insert(i);
                continue;
            }
            out[[i, 0]] = av.row(i).dot(&bv.row(j)) / (na * nb);
        }
        let id = self.push(
            out,
            Op::RowCosine {
                a,
                b,
                norms_a,
                norms_b,
                degenerate,
            },
        );
        Ok((id, first))
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("row_dot", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = (av * bv).sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    /// Sum of squared entries.
    pub fn l2_norm_sq(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().map(|v| v * v).sum::<f64>();
        self.push(Array2::from_elem((1, 1), v), Op::SumSq(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), v), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1) as f64;
        let v = self.value(x).sum() / n;
        self.push(Array2::from_elem((1, 1), v), Op::Mean(x))
    }

    /// Per-row `-[y ln p + (1-y) ln(1-p)]` for an `n x 1` probability column,
    /// with `p` clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]`.
    pub fn bce(&mut self, p: NodeId, labels: &[bool]) -> Result<NodeId> {
        let ps = self.shape(p);
        if ps != (labels.len(), 1) {
            return Err(AutodiffError::Shape {
                op: "bce",
                left: ps,
                right: (labels.len(), 1),
            });
        }
        let labels: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
        let mut out = Array2::zeros(ps);
        for (i, &y) in labels.iter().enumerate() {
            let q = self.value(p)[[i, 0]].clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
            out[[i, 0]] = -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
        }
        Ok(self.push(out, Op::Bce { p, labels }))
    }

    /// Reverse pass from a scalar root. Gradients accumulate into whatever is
    /// already present; call [`Tape::zero_grad`] between passes.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let rs = self.shape(root);
        if rs != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(rs));
        }
        accumulate(
            &mut self.nodes[root.0].grad,
            &Array2::ones((1, 1)),
            (1, 1),
        );
        for id in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            propagate(before, node, g);
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: &Array2<f64>, shape: (usize, usize)) {
    debug_assert_eq!(g.dim(), shape);
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g.clone()),
    }
}

fn accumulate_owned(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn grad_slot(nodes: &mut [Node], id: NodeId) -> &mut Option<Array2<f64>> {
    &mut nodes[id.0].grad
}

fn zeros_like(nodes: &[Node], id: NodeId) -> Array2<f64> {
    Array2::zeros(nodes[id.0].value.dim())
}

/// Pushes the gradient `g` of `node` into its inputs, which all live in `nodes`.
fn propagate(nodes: &mut [Node], node: &Node, g: &Array2<f64>) {
    match &node.op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let dx = g.dot(&nodes[w.0].value);
            let dw = g.t().dot(&nodes[x.0].value);
            accumulate_owned(grad_slot(nodes, *x), dx);
            accumulate_owned(grad_slot(nodes, *w), dw);
            if let Some(b) = b {
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate_owned(grad_slot(nodes, *b), db);
            }
        }
        Op::Add(a, b) => {
            let s = g.dim();
            accumulate(grad_slot(nodes, *a), g, s);
            accumulate(grad_slot(nodes, *b), g, s);
        }
        Op::Sub(a, b) => {
            let s = g.dim();
            accumulate(grad_slot(nodes, *a), g, s);
            accumulate_owned(grad_slot(nodes, *b), -g);
        }
        Op::AddRow { x, row } => {
            accumulate(grad_slot(nodes, *x), g, g.dim());
            let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
            accumulate_owned(grad_slot(nodes, *row), dr);
        }
        Op::ScaleShift { x, scale } => {
            accumulate_owned(grad_slot(nodes, *x), g * *scale);
        }
        Op::ConcatCols(a, b) => {
            let split = nodes[a.0].value.ncols();
            let da = g.slice(s![.., ..split]).to_owned();
            let db = g.slice(s![.., split..]).to_owned();
            accumulate_owned(grad_slot(nodes, *a), da);
            accumulate_owned(grad_slot(nodes, *b), db);
        }
        Op::SliceCols { x, start } => {
            let mut dx = zeros_like(nodes, *x);
            dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
            accumulate_owned(grad_slot(nodes, *x), dx);
        }
        Op::Gather { sources, picks } => {
            let mut partial: Vec<Option<Array2<f64>>> = vec![None; sources.len()];
            for (k, &(src, row)) in picks.iter().enumerate() {
                let slot = partial[src as usize].get_or_insert_with(|| zeros_like(nodes, sources[src as usize]));
                let mut r = slot.row_mut(row as usize);
                r += &g.row(k);
            }
            for (src, part) in sources.iter().zip(partial) {
                if let Some(p) = part {
                    accumulate_owned(grad_slot(nodes, *src), p);
                }
            }
        }
        Op::Relu(x) => {
            let mut dx = g.clone();
            ndarray::Zip::from(&mut dx)
                .and(&node.value)
                .for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0
                    }
                });
            accumulate_owned(grad_slot(nodes, *x), dx);
        }
        Op::Dropout { x, mask } => {
            accumulate_owned(grad_slot(nodes, *x), g * mask);
        }
        Op::Sigmoid(x) => {
            let dx = ndarray::Zip::from(g)
                .and(&node.value)
                .map_collect(|&g, &y| g * y * (1.0 - y));
            accumulate_owned(grad_slot(nodes, *x), dx);
        }
        Op::Softplus(x) => {
            let dx = ndarray::Zip::from(g)
                .and(&nodes[x.0].value)
                .map_collect(|&g, &v| g * stable_sigmoid(v));
            accumulate_owned(grad_slot(nodes, *x), dx);
        }
        Op::RowCosine {
            a,
            b,
            norms_a,
            norms_b,
            degenerate,
        } => {
            let broadcast = nodes[b.0].value.nrows() == 1 && nodes[a.0].value.nrows() != 1;
            let mut da = zeros_like(nodes, *a);
            let mut db = zeros_like(nodes, *b);
            {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                for i in 0..av.nrows() {
                    if degenerate[i] {
                        continue;
                    }
                    let j = if broadcast { 0 } else { i };
                    let gi = g[[i, 0]];
                    if gi == 0.0 {
                        continue;
                    }
                    let c = node.value[[i, 0]];
                    let (na, nb) = (norms_a[i], norms_b[j]);
                    let inv = 1.0 / (na * nb);
                    let (ra, rb) = (av.row(i), bv.row(j));
                    let ca = c / (na * na);
                    let cb = c / (nb * nb);
                    {
                        let mut out = da.row_mut(i);
                        ndarray::Zip::from(&mut out)
                            .and(&ra)
                            .and(&rb)
                            .for_each(|o, &x, &y| *o += gi * (y * inv - ca * x));
                    }
                    let mut out = db.row_mut(j);
                    ndarray::Zip::from(&mut out)
                        .and(&ra)
                        .and(&rb)
                        .for_each(|o, &x, &y| *o += gi * (x * inv - cb * y));
                }
            }
            if a == b {
                da += &db;
                accumulate_owned(grad_slot(nodes, *a), da);
            } else {
                accumulate_owned(grad_slot(nodes, *a), da);
                accumulate_owned(grad_slot(nodes, *b), db);
            }
        }
        Op::RowDot(a, b) => {
            let col = g.column(0);
            let da = &nodes[b.0].value * &col.insert_axis(Axis(1));
            let db = &nodes[a.0].value * &col.insert_axis(Axis(1));
            accumulate_owned(grad_slot(nodes, *a), da);
            accumulate_owned(grad_slot(nodes, *b), db);
        }
        Op::SumSq(x) => {
            let dx = &nodes[x.0].value * (2.0 * g[[0, 0]]);
            accumulate_owned(grad_slot(nodes, *x), dx);
        }
        Op::Sum(x) => {
            let dx = Array2::from_elem(nodes[x.0].value.dim(), g[[0, 0]]);
            accumulate_owned(grad_slot(nodes, *x), dx);
        }
        Op::Mean(x) => {
            let n = nodes[x.0].value.len().max(1) as f64;
            let dx = Array2::from_elem(nodes[x.0].value.dim(), g[[0, 0]] / n);
            accumulate_owned(grad_slot(nodes, *x), dx);
        }
        Op::Bce { p, labels } => {
            let pv = &nodes[p.0].value;
            let mut dp = Array2::zeros(pv.dim());
            for (i, &y) in labels.iter().enumerate() {
                let q = pv[[i, 0]];
                if !(LOG_CLAMP..=1.0 - LOG_CLAMP).contains(&q) {
                    continue;
                }
                dp[[i, 0]] = g[[i, 0]] * (-y / q + (1.0 - y) / (1.0 - q));
            }
            accumulate_owned(grad_slot(nodes, *p), dp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use ndarray::array;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn affine_identity_and_arithmetic() {
        let mut t = Tape::new();
        let w = t.leaf(array![[1.0, 0.0], [0.0, 1.0]]);
        let x = t.vector(&[3.0, 4.0]);
        let b = t.vector(&[0.0, 0.0]);
        let y = t.affine(w, x, b).unwrap();
        assert_eq!(t.value(y), &array![[3.0, 4.0]]);

        let w = t.leaf(array![[1.0, 1.0]]);
        let x = t.vector(&[2.0, 5.0]);
        let b = t.vector(&[1.0]);
        let y = t.affine(w, x, b).unwrap();
        assert_eq!(t.value(y), &array![[8.0]]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let w = t.leaf(Array2::zeros((2, 3)));
        let x = t.vector(&[1.0, 2.0]);
        let b = t.vector(&[0.0, 0.0]);
        let err = t.affine(w, x, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::Shape {
                op: "affine",
                left: (2, 3),
                right: (1, 2)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn concat_values_and_gradient_split() {
        let mut t = Tape::new();
        let a = t.vector(&[1.0, 2.0]);
        let b = t.vector(&[3.0]);
        let c = t.concat(a, b).unwrap();
        assert_eq!(t.value(c), &array![[1.0, 2.0, 3.0]]);
        let g = t.vector(&[5.0, 6.0, 7.0]);
        let d = t.row_dot(c, g).unwrap();
        t.backward(d).unwrap();
        assert_eq!(t.grad(a), array![[5.0, 6.0]]);
        assert_eq!(t.grad(b), array![[7.0]]);
    }

    #[test]
    fn relu_values_and_subgradient_at_zero() {
        let mut t = Tape::new();
        let x = t.vector(&[-1.0, 0.0, 2.0]);
        let y = t.relu(x);
        assert_eq!(t.value(y), &array![[0.0, 0.0, 2.0]]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), array![[0.0, 0.0, 1.0]]);
    }

    #[test]
    fn sigmoid_closed_forms_and_stability() {
        let mut t = Tape::new();
        let x = t.vector(&[0.0, 10.0, -10.0, 700.0, -700.0]);
        let y = t.sigmoid(x);
        let v = t.value(y);
        assert_eq!(v[[0, 0]], 0.5);
        assert!(close(v[[0, 1]], 0.9999546, 1e-7));
        assert!(close(v[[0, 2]], 4.5398e-5, 1e-9));
        assert!(v[[0, 3]] <= 1.0 && v[[0, 4]] >= 0.0);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn backward_of_leaf_and_sigmoid() {
        let mut t = Tape::new();
        let x = t.scalar_leaf(3.0);
        t.backward(x).unwrap();
        assert_eq!(t.grad(x)[[0, 0]], 1.0);

        let mut t = Tape::new();
        let c = t.scalar_leaf(0.0);
        let s = t.sigmoid(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(c)[[0, 0]], 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.vector(&[1.0, 2.0]);
        assert_eq!(t.backward(x), Err(AutodiffError::NonScalarRoot((1, 2))));
    }

    #[test]
    fn diamond_accumulates() {
        let mut t = Tape::new();
        let x = t.scalar_leaf(1.5);
        let y = t.add(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x)[[0, 0]], 2.0);
    }

    #[test]
    fn unreachable_nodes_keep_zero_grad() {
        let mut t = Tape::new();
        let x = t.scalar_leaf(1.0);
        let unused = t.vector(&[4.0, 5.0]);
        let y = t.scale(x, 3.0);
        t.backward(y).unwrap();
        assert_eq!(t.grad(unused), Array2::<f64>::zeros((1, 2)));
        assert_eq!(t.grad(x)[[0, 0]], 3.0);
        t.zero_grad();
        assert_eq!(t.grad(x)[[0, 0]], 0.0);
    }

    #[test]
    fn cosine_values_and_degenerate_error() {
        let mut t = Tape::new();
        let a = t.vector(&[1.0, 1.0]);
        let c = t.cosine(a, a).unwrap();
        assert!(close(t.scalar(c), 1.0, 1e-12));
        let x = t.vector(&[1.0, 0.0]);
        let y = t.vector(&[0.0, 1.0]);
        let c = t.cosine(x, y).unwrap();
        assert_eq!(t.scalar(c), 0.0);
        let z = t.vector(&[0.0, 0.0]);
        assert!(matches!(
            t.cosine(x, z),
            Err(AutodiffError::Degenerate { row: 0, .. })
        ));
        let (g, n) = t.cosine_guarded(x, z).unwrap();
        assert_eq!(n, 1);
        assert_eq!(t.scalar(g), 0.0);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = Rng::new(0, Stream::Dropout);
        let mut t = Tape::new();
        let x = t.vector(&[1.0, -2.0, 3.0]);
        assert_eq!(t.dropout(x, 0.0, true, &mut rng), x);
        assert_eq!(t.dropout(x, 0.2, false, &mut rng), x);
    }

    #[test]
    fn dropout_monte_carlo() {
        let mut rng = Rng::new(11, Stream::Dropout);
        let mut t = Tape::new();
        let n = 100_000;
        let x = t.leaf(Array2::from_elem((1, n), 1.0));
        let y = t.dropout(x, 0.2, true, &mut rng);
        let v = t.value(y);
        let survivors = v.iter().filter(|&&e| e != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.8).abs() < 0.01, "survivor fraction {survivors}");
        let mean = v.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn l2_norm_sq_values_and_grad() {
        let mut t = Tape::new();
        let a = t.vector(&[1.0, 0.0]);
        let b = t.vector(&[0.0, 2.0]);
        let na = t.l2_norm_sq(a);
        let nb = t.l2_norm_sq(b);
        assert_eq!(t.scalar(na), 1.0);
        assert_eq!(t.scalar(nb), 4.0);
        let x = t.vector(&[1.0, 2.0]);
        let n = t.l2_norm_sq(x);
        t.backward(n).unwrap();
        assert_eq!(t.grad(x), array![[2.0, 4.0]]);
    }

    #[test]
    fn bce_clamps() {
        let mut t = Tape::new();
        let p = t.leaf(array![[0.5], [0.0]]);
        let l = t.bce(p, &[true, true]).unwrap();
        assert!(close(t.value(l)[[0, 0]], std::f64::consts::LN_2, 1e-12));
        assert!(close(t.value(l)[[1, 0]], 1e7f64.ln(), 1e-6));
    }

    #[test]
    fn gather_scatters_repeated_rows() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let g = t.rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(t.value(g), &array![[3.0, 4.0], [3.0, 4.0], [1.0, 2.0]]);
        let s = t.sum(g);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), array![[1.0, 1.0], [2.0, 2.0]]);
    }
}
