//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a computation record. Every operation is evaluated eagerly
//! and appended to the record in construction order, so the record is always
//! topologically sorted. Backward passes are themselves recorded as ordinary
//! operations on the same record, which makes a gradient an ordinary
//! differentiable value: differentiating a loss that was evaluated at
//! `theta - beta * grad(inner)(theta)` yields the full meta-gradient.
//!
//! Each node carries a differentiation order. Inputs and forward operations
//! are order 0; a backward pass started from a root of order `k` records its
//! adjoint operations at order `k + 1`. Passes that would exceed
//! [`GraphConfig::max_order`] are rejected.
//!
//! ```
//! use metaref_core::diffengine::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.mul(x, x);
//! let dy = g.grad(y, &[x]).unwrap()[0];
//! assert_eq!(g.item(dy), 6.0);
//! let d2y = g.gradients(dy, &[x]).unwrap();
//! assert_eq!(d2y[0].item(), 2.0);
//! ```

mod tensor;

pub use tensor::Tensor;

use std::sync::atomic::{AtomicU32, Ordering};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("non-finite value produced by op #{index} ({op})")]
    NonFinite { index: usize, op: &'static str },
    #[error("variable does not belong to this computation record")]
    ForeignVar,
    #[error("differentiation order {requested} exceeds the configured maximum {max}")]
    OrderExceeded { requested: u8, max: u8 },
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    graph: u32,
    index: u32,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    /// Highest differentiation order a backward pass may record.
    pub max_order: u8,
    /// When set, [`Graph::grad`] returns detached constants, so any outer
    /// derivative treats inner gradients as fixed.
    pub first_order: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            max_order: 2,
            first_order: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    ScaleBy(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Broadcast(usize),
    SumTo(usize),
    Exp(usize),
    Ln(usize),
    Sin(usize),
    Cos(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    SafeRecip(usize),
    Relu(usize),
    Abs(usize),
    ClampMin(usize, f64),
    Pick(usize, usize),
    Place(usize, usize),
    SliceCols(usize, usize),
    PadCols(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::ScaleBy(..) => "scale_by",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Broadcast(..) => "broadcast",
            Op::SumTo(..) => "sum_to",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Sqrt(..) => "sqrt",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::SafeRecip(..) => "safe_recip",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::ClampMin(..) => "clamp_min",
            Op::Pick(..) => "pick",
            Op::Place(..) => "place",
            Op::SliceCols(..) => "slice_cols",
            Op::PadCols(..) => "pad_cols",
        }
    }

    fn inputs(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf | Op::Const => [None, None],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::ScaleBy(a, b)
            | Op::MatMul(a, b) => [Some(a), Some(b)],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Transpose(a)
            | Op::Broadcast(a)
            | Op::SumTo(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Sqrt(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::SafeRecip(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::ClampMin(a, _)
            | Op::Pick(a, _)
            | Op::Place(a, _)
            | Op::SliceCols(a, _)
            | Op::PadCols(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether any leaf is upstream of this node.
    tracked: bool,
    order: u8,
}

/// A computation record. Confined to one thread; distinct records share no state.
pub struct Graph {
    id: u32,
    config: GraphConfig,
    nodes: Vec<Node>,
    /// Order assigned to nodes recorded right now (raised during backward passes).
    level: u8,
    non_finite: Option<(usize, &'static str)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of every leaf of a record, as returned by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.entries
            .binary_search_by_key(&var, |(v, _)| *v)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.entries.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_config(GraphConfig::default())
    }

    pub fn with_config(config: GraphConfig) -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            config,
            nodes: Vec::new(),
            level: 0,
            non_finite: None,
        }
    }

    pub fn config(&self) -> GraphConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether `var` was recorded by this graph.
    pub fn owns(&self, var: Var) -> bool {
        var.graph == self.id && var.index() < self.nodes.len()
    }

    fn idx(&self, var: Var) -> usize {
        assert!(
            self.owns(var),
            "variable does not belong to this computation record"
        );
        var.index()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[self.idx(var)].value
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self, var: Var) -> f64 {
        self.value(var).item()
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.value(var).shape()
    }

    /// Differentiation order of the node behind `var`.
    pub fn order(&self, var: Var) -> u8 {
        self.nodes[self.idx(var)].order
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[self.idx(var)].tracked
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let index = self.nodes.len();
        let mut tracked = matches!(op, Op::Leaf);
        let mut order = self.level;
        for input in op.inputs().into_iter().flatten() {
            let n = &self.nodes[input];
            tracked |= n.tracked;
            order = order.max(n.order);
        }
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((index, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            tracked,
            order,
        });
        Var {
            graph: self.id,
            index: u32::try_from(index).expect("computation record overflow"),
        }
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a value that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// A constant copy of `a`; gradients stop here.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    /// Runs an expression builder and reports the first non-finite intermediate.
    pub fn forward<F>(&mut self, build: F) -> Result<Var, AdError>
    where
        F: FnOnce(&mut Graph) -> Var,
    {
        let root = build(self);
        self.check_finite()?;
        Ok(root)
    }

    /// Fails if any recorded value so far was NaN or infinite.
    pub fn check_finite(&self) -> Result<(), AdError> {
        match self.non_finite {
            Some((index, op)) => Err(AdError::NonFinite { index, op }),
            None => Ok(()),
        }
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(
                va.shape(),
                vb.shape(),
                "{}: shape mismatch {:?} vs {:?}",
                op.name(),
                va.shape(),
                vb.shape()
            );
            va.zip_map(vb, f)
        };
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.binary(a, b, Op::Add(ia, ib), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.binary(a, b, Op::Sub(ia, ib), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.binary(a, b, Op::Mul(ia, ib), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.binary(a, b, Op::Div(ia, ib), |x, y| x / y)
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::Neg(i), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::Scale(i, c), |x| x * c)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::Offset(i), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::Exp(i), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::Ln(i), f64::ln)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::Sin(i), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::Cos(i), f64::cos)
    }

    /// Square root. Its derivative is taken as zero where the output is zero,
    /// so `sqrt(sum of squares)` has a zero gradient at the origin.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::Sqrt(i), f64::sqrt)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::Tanh(i), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::Sigmoid(i), |x| 1.0 / (1.0 + (-x).exp()))
    }

    /// `1 / a` where `a != 0`, and `0` where `a == 0`.
    pub fn safe_recip(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::SafeRecip(i), |x| if x == 0.0 { 0.0 } else { 1.0 / x })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::Relu(i), |x| x.max(0.0))
    }

    /// `|a|`; at zero the subgradient is `+1`.
    pub fn abs(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::Abs(i), f64::abs)
    }

    /// `max(a, lo)`; ties route the adjoint to `a`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let i = self.idx(a);
        self.unary(a, Op::ClampMin(i, lo), |x| if x >= lo { x } else { lo })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    // ---- products and shapes ------------------------------------------------

    /// Multiplies every entry of `a` by the `1 x 1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let (ia, is) = (self.idx(a), self.idx(s));
        let factor = self.value(s).item();
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::ScaleBy(ia, is))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(ia, ib))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let i = self.idx(a);
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(i))
    }

    /// Repeats a `1x1`, `1xc` or `rx1` value to shape `rows x cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let i = self.idx(a);
        let src = self.value(a);
        let (r, c) = src.shape();
        assert!(
            (r == rows || r == 1) && (c == cols || c == 1),
            "cannot broadcast {r}x{c} to {rows}x{cols}"
        );
        let mut data = Vec::with_capacity(rows * cols);
        for row in 0..rows {
            for col in 0..cols {
                data.push(src.get(if r == 1 { 0 } else { row }, if c == 1 { 0 } else { col }));
            }
        }
        self.push(Tensor::new(rows, cols, data), Op::Broadcast(i))
    }

    /// Sums `a` down to shape `rows x cols`, where each target dimension is
    /// either 1 or the matching source dimension.
    pub fn sum_to(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let i = self.idx(a);
        let src = self.value(a);
        let (r, c) = src.shape();
        assert!(
            (rows == r || rows == 1) && (cols == c || cols == 1),
            "cannot reduce {r}x{c} to {rows}x{cols}"
        );
        let mut data = vec![0.0; rows * cols];
        for row in 0..r {
            for col in 0..c {
                let tr = if rows == 1 { 0 } else { row };
                let tc = if cols == 1 { 0 } else { col };
                data[tr * cols + tc] += src.get(row, col);
            }
        }
        self.push(Tensor::new(rows, cols, data), Op::SumTo(i))
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        self.sum_to(a, 1, 1)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let c = self.value(a).cols();
        self.sum_to(a, 1, c)
    }

    /// Column means, `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let r = self.value(a).rows() as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r)
    }

    /// Row sums, `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let r = self.value(a).rows();
        self.sum_to(a, r, 1)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        let b = self.broadcast(row, r, c);
        self.add(a, b)
    }

    /// Entry `index` (row-major) as a `1 x 1` value.
    pub fn pick(&mut self, a: Var, index: usize) -> Var {
        let i = self.idx(a);
        let v = self.value(a).data()[index];
        self.push(Tensor::scalar(v), Op::Pick(i, index))
    }

    /// Embeds a `1 x 1` value at `index` of an otherwise zero `rows x cols` tensor.
    pub fn place(&mut self, a: Var, index: usize, rows: usize, cols: usize) -> Var {
        let i = self.idx(a);
        let mut t = Tensor::zeros(rows, cols);
        t.data_mut()[index] = self.value(a).item();
        self.push(t, Op::Place(i, index))
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let i = self.idx(a);
        let src = self.value(a);
        assert!(start + len <= src.cols(), "column slice out of range");
        let mut data = Vec::with_capacity(src.rows() * len);
        for r in 0..src.rows() {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let t = Tensor::new(src.rows(), len, data);
        self.push(t, Op::SliceCols(i, start))
    }

    /// Places `a` at column offset `start` inside a zero tensor with `total` columns.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let i = self.idx(a);
        let src = self.value(a);
        assert!(start + src.cols() <= total, "column padding out of range");
        let mut t = Tensor::zeros(src.rows(), total);
        for r in 0..src.rows() {
            t.data_mut()[r * total + start..r * total + start + src.cols()]
                .copy_from_slice(src.row(r));
        }
        self.push(t, Op::PadCols(i, start))
    }

    /// Side-by-side concatenation of two tensors with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ra, rb, "concat_cols row mismatch");
        let pa = self.pad_cols(a, 0, ca + cb);
        let pb = self.pad_cols(b, ca, ca + cb);
        self.add(pa, pb)
    }

    /// Largest entry; the adjoint goes to the first maximal index.
    pub fn max_all(&mut self, a: Var) -> Var {
        let idx = first_extreme(self.value(a).data(), |x, best| x > best);
        self.pick(a, idx)
    }

    /// Smallest entry; the adjoint goes to the first minimal index.
    pub fn min_all(&mut self, a: Var) -> Var {
        let idx = first_extreme(self.value(a).data(), |x, best| x < best);
        self.pick(a, idx)
    }

    /// Row-wise softmax. The row maximum is shifted out as a constant,
    /// which leaves values and derivatives unchanged.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let shift = {
            let v = self.value(a);
            let maxes: Vec<f64> = (0..r)
                .map(|i| v.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            Tensor::column(&maxes)
        };
        let shift = self.constant(shift);
        let shift = self.broadcast(shift, r, c);
        let z = self.sub(a, shift);
        let e = self.exp(z);
        let s = self.sum_cols(e);
        let s = self.broadcast(s, r, c);
        self.div(e, s)
    }

    // ---- differentiation ----------------------------------------------------

    /// Records the backward pass from `root` and returns adjoint nodes indexed
    /// by node position (only nodes at or before `root`).
    fn backprop(&mut self, root: Var) -> Result<Vec<Option<usize>>, AdError> {
        if !self.owns(root) {
            return Err(AdError::ForeignVar);
        }
        let root_idx = root.index();
        let requested = self.nodes[root_idx].order + 1;
        if requested > self.config.max_order {
            return Err(AdError::OrderExceeded {
                requested,
                max: self.config.max_order,
            });
        }
        let saved_level = self.level;
        self.level = requested;

        let mut adj: Vec<Option<usize>> = vec![None; root_idx + 1];
        let (r, c) = self.nodes[root_idx].value.shape();
        let seed = self.constant(Tensor::full(r, c, 1.0));
        adj[root_idx] = Some(seed.index());

        for i in (0..=root_idx).rev() {
            let Some(gi) = adj[i] else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            let g = self.var_at(gi);
            let out = self.var_at(i);
            let op = self.nodes[i].op;
            match op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    self.accumulate(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    if self.nodes[b].tracked {
                        let d = self.neg(g);
                        self.accumulate(&mut adj, b, d);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a].tracked {
                        let d = self.mul(g, self.var_at(b));
                        self.accumulate(&mut adj, a, d);
                    }
                    if self.nodes[b].tracked {
                        let d = self.mul(g, self.var_at(a));
                        self.accumulate(&mut adj, b, d);
                    }
                }
                Op::Div(a, b) => {
                    let vb = self.var_at(b);
                    if self.nodes[a].tracked {
                        let d = self.div(g, vb);
                        self.accumulate(&mut adj, a, d);
                    }
                    if self.nodes[b].tracked {
                        let q = self.div(out, vb);
                        let d = self.mul(g, q);
                        let d = self.neg(d);
                        self.accumulate(&mut adj, b, d);
                    }
                }
                Op::Neg(a) => {
                    let d = self.neg(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Scale(a, k) => {
                    let d = self.scale(g, k);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Offset(a) => self.accumulate(&mut adj, a, g),
                Op::ScaleBy(a, s) => {
                    if self.nodes[a].tracked {
                        let d = self.scale_by(g, self.var_at(s));
                        self.accumulate(&mut adj, a, d);
                    }
                    if self.nodes[s].tracked {
                        let p = self.mul(g, self.var_at(a));
                        let d = self.sum(p);
                        self.accumulate(&mut adj, s, d);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a].tracked {
                        let bt = self.transpose(self.var_at(b));
                        let d = self.matmul(g, bt);
                        self.accumulate(&mut adj, a, d);
                    }
                    if self.nodes[b].tracked {
                        let at = self.transpose(self.var_at(a));
                        let d = self.matmul(at, g);
                        self.accumulate(&mut adj, b, d);
                    }
                }
                Op::Transpose(a) => {
                    let d = self.transpose(g);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Broadcast(a) => {
                    let (r, c) = self.nodes[a].value.shape();
                    let d = self.sum_to(g, r, c);
                    self.accumulate(&mut adj, a, d);
                }
                Op::SumTo(a) => {
                    let (r, c) = self.nodes[a].value.shape();
                    let d = self.broadcast(g, r, c);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Exp(a) => {
                    let d = self.mul(g, out);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Ln(a) => {
                    let d = self.div(g, self.var_at(a));
                    self.accumulate(&mut adj, a, d);
                }
                Op::Sin(a) => {
                    let cos = self.cos(self.var_at(a));
                    let d = self.mul(g, cos);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Cos(a) => {
                    let sin = self.sin(self.var_at(a));
                    let d = self.mul(g, sin);
                    let d = self.neg(d);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Sqrt(a) => {
                    let r = self.safe_recip(out);
                    let d = self.mul(g, r);
                    let d = self.scale(d, 0.5);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Tanh(a) => {
                    let sq = self.mul(out, out);
                    let one_minus = self.neg(sq);
                    let one_minus = self.offset(one_minus, 1.0);
                    let d = self.mul(g, one_minus);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Sigmoid(a) => {
                    let comp = self.neg(out);
                    let comp = self.offset(comp, 1.0);
                    let slope = self.mul(out, comp);
                    let d = self.mul(g, slope);
                    self.accumulate(&mut adj, a, d);
                }
                Op::SafeRecip(a) => {
                    let sq = self.mul(out, out);
                    let d = self.mul(g, sq);
                    let d = self.neg(d);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let d = self.mask(g, mask);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Abs(a) => {
                    let sign = self.nodes[a].value.map(|x| if x >= 0.0 { 1.0 } else { -1.0 });
                    let d = self.mask(g, sign);
                    self.accumulate(&mut adj, a, d);
                }
                Op::ClampMin(a, lo) => {
                    let mask = self.nodes[a].value.map(|x| if x >= lo { 1.0 } else { 0.0 });
                    let d = self.mask(g, mask);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Pick(a, index) => {
                    let (r, c) = self.nodes[a].value.shape();
                    let d = self.place(g, index, r, c);
                    self.accumulate(&mut adj, a, d);
                }
                Op::Place(a, index) => {
                    let d = self.pick(g, index);
                    self.accumulate(&mut adj, a, d);
                }
                Op::SliceCols(a, start) => {
                    let total = self.nodes[a].value.cols();
                    let d = self.pad_cols(g, start, total);
                    self.accumulate(&mut adj, a, d);
                }
                Op::PadCols(a, start) => {
                    let len = self.nodes[a].value.cols();
                    let d = self.slice_cols(g, start, len);
                    self.accumulate(&mut adj, a, d);
                }
            }
        }
        self.level = saved_level;
        Ok(adj)
    }

    fn var_at(&self, index: usize) -> Var {
        Var {
            graph: self.id,
            index: index as u32,
        }
    }

    fn mask(&mut self, g: Var, mask: Tensor) -> Var {
        let m = self.constant(mask);
        self.mul(g, m)
    }

    fn accumulate(&mut self, adj: &mut [Option<usize>], target: usize, contribution: Var) {
        if !self.nodes[target].tracked {
            return;
        }
        adj[target] = Some(match adj[target] {
            None => contribution.index(),
            Some(prev) => self.add(self.var_at(prev), contribution).index(),
        });
    }

    fn zero_like(&mut self, var: Var) -> Var {
        let (r, c) = self.shape(var);
        self.constant(Tensor::zeros(r, c))
    }

    /// Gradients of the `root` value w.r.t. each of `wrt`, recorded as new
    /// nodes so they can be differentiated again. In first-order mode the
    /// results are detached constants.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>, AdError> {
        if wrt.iter().any(|&w| !self.owns(w)) {
            return Err(AdError::ForeignVar);
        }
        let adj = self.backprop(root)?;
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = match adj.get(w.index()).copied().flatten() {
                Some(i) => self.var_at(i),
                None => self.zero_like(w),
            };
            out.push(if self.config.first_order {
                self.stop_gradient(g)
            } else {
                g
            });
        }
        self.check_finite()?;
        Ok(out)
    }

    /// Gradient values of `root` w.r.t. each of `wrt`. The scratch nodes of
    /// the backward pass are discarded afterwards, so the record is left as
    /// it was.
    pub fn gradients(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>, AdError> {
        if wrt.iter().any(|&w| !self.owns(w)) {
            return Err(AdError::ForeignVar);
        }
        let mark = self.nodes.len();
        let adj = self.backprop(root)?;
        let out = wrt
            .iter()
            .map(|w| match adj.get(w.index()).copied().flatten() {
                Some(i) => self.nodes[i].value.clone(),
                None => {
                    let (r, c) = self.nodes[w.index()].value.shape();
                    Tensor::zeros(r, c)
                }
            })
            .collect();
        let scratch_error = self.non_finite.filter(|(i, _)| *i >= mark);
        self.nodes.truncate(mark);
        if let Some((index, op)) = scratch_error {
            self.non_finite = None;
            return Err(AdError::NonFinite { index, op });
        }
        self.check_finite()?;
        Ok(out)
    }

    /// Adjoints of `root` for every leaf in the record; unreached leaves get zeros.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, AdError> {
        let leaves: Vec<Var> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf))
            .map(|i| self.var_at(i))
            .collect();
        let values = self.gradients(root, &leaves)?;
        Ok(Gradients {
            entries: leaves.into_iter().zip(values).collect(),
        })
    }
}

fn first_extreme(data: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    assert!(!data.is_empty(), "extreme of an empty tensor");
    let mut best = 0;
    for (i, &x) in data.iter().enumerate().skip(1) {
        if better(x, data[best]) {
            best = i;
        }
    }
    best
}

/// Differentiates `outer(inner(params))` w.r.t. `params`, including the path
/// through any gradient that `inner` takes. `inner` maps parameter handles to
/// updated parameter handles (typically a gradient step); `outer` maps those
/// to a scalar loss. With `config.first_order` set, inner gradients are
/// treated as constants.
pub fn grad_of_grad<I, O>(
    params: &[Tensor],
    inner: I,
    outer: O,
    config: GraphConfig,
) -> Result<Vec<Tensor>, AdError>
where
    I: FnOnce(&mut Graph, &[Var]) -> Result<Vec<Var>, AdError>,
    O: FnOnce(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::with_config(config);
    let leaves: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let updated = inner(&mut g, &leaves)?;
    let root = g.forward(|g| outer(g, &updated))?;
    g.gradients(root, &leaves)
}
