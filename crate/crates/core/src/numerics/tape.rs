//! Minimal reverse-mode differentiation over batched 2-D arrays.
//!
//! A [`Tape`] is an append-only arena of nodes; every operation records its
//! parents and caches its forward value, and [`Tape::backward`] walks the
//! arena in reverse accumulating vector-Jacobian products. The op set is
//! exactly what the flow encoders, density evaluations, and feed-forward
//! heads in this crate need; there is no broadcasting beyond row vectors.
//!
//! All arrays are `Array2<f64>` with rows = batch. Scalars are 1x1.

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable input (parameters, or probe points under grad check).
    Leaf,
    /// Input with no gradient tracked.
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    /// `(B,d) + (1,d)`, the row broadcast used for biases.
    AddRow(NodeId, NodeId),
    /// `(B,d) * (1,d)`, the row broadcast used for masks.
    MulRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    /// Row-wise sum: `(B,d) -> (B,1)`.
    SumRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Row-wise log-sum-exp: `(B,K) -> (B,1)`.
    LogSumExpRows(NodeId),
    /// Horizontal stack of `(B,1)` columns into `(B,K)`.
    ConcatCols(Vec<NodeId>),
    /// max(a, b) on scalars; gradient follows the larger branch (ties -> a).
    MaxScalar(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Gradients produced by a backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root w.r.t. the given node, zeros if the node
    /// did not influence the root.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Array2<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.nodes[id.0].value.raw_dim()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    // max(x,0) + ln(1+e^{-|x|}) avoids overflow on both tails
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Extract a 1x1 node as f64.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[(0, 0)]
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "mul");
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.value(a);
        self.push(Op::Neg(a), v)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.value(row).nrows(), 1, "add_row: bias must be 1xd");
        assert_eq!(self.value(a).ncols(), self.value(row).ncols(), "add_row: width mismatch");
        let v = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), v)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.value(row).nrows(), 1, "mul_row: mask must be 1xd");
        assert_eq!(self.value(a).ncols(), self.value(row).ncols(), "mul_row: width mismatch");
        let v = self.value(a) * self.value(row);
        self.push(Op::MulRow(a, row), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).ncols(), self.value(b).nrows(), "matmul: inner dims differ");
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        self.push(Op::AddScalar(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumRows(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let v = Array2::from_elem((1, 1), self.value(a).sum() / n);
        self.push(Op::MeanAll(a), v)
    }

    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.outer_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            out[(i, 0)] = m + s.ln();
        }
        self.push(Op::LogSumExpRows(a), out)
    }

    pub fn concat_cols(&mut self, cols: &[NodeId]) -> NodeId {
        assert!(!cols.is_empty(), "concat_cols: empty input");
        let rows = self.value(cols[0]).nrows();
        let mut out = Array2::zeros((rows, cols.len()));
        for (j, &c) in cols.iter().enumerate() {
            let v = self.value(c);
            assert_eq!(v.dim(), (rows, 1), "concat_cols: every column must be Bx1");
            out.column_mut(j).assign(&v.column(0));
        }
        self.push(Op::ConcatCols(cols.to_vec()), out)
    }

    pub fn max_scalar(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), (1, 1), "max_scalar: scalar operands only");
        assert_eq!(self.value(b).dim(), (1, 1), "max_scalar: scalar operands only");
        let v = Array2::from_elem((1, 1), self.scalar(a).max(self.scalar(b)));
        self.push(Op::MaxScalar(a, b), v)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        // Nodes only reference earlier nodes, so index order is topological.
        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let nodes = &self.nodes;
        let mut add_to = |id: NodeId, contrib: Array2<f64>| {
            // constants never feed parameters, so skip the allocation
            if matches!(nodes[id.0].op, Op::Constant) {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => *acc += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                add_to(*a, g.clone());
                add_to(*b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(*a, g.clone());
                add_to(*b, -g);
            }
            Op::Mul(a, b) => {
                add_to(*a, g * self.value(*b));
                add_to(*b, g * self.value(*a));
            }
            Op::Neg(a) => add_to(*a, -g),
            Op::AddRow(a, row) => {
                add_to(*a, g.clone());
                add_to(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                add_to(*a, g * self.value(*row));
                add_to(*row, (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MatMul(a, b) => {
                add_to(*a, g.dot(&self.value(*b).t()));
                add_to(*b, self.value(*a).t().dot(g));
            }
            Op::Scale(a, c) => add_to(*a, g * *c),
            Op::AddScalar(a) => add_to(*a, g.clone()),
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                add_to(*a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Exp(a) => add_to(*a, g * &self.nodes[i].value),
            Op::Softplus(a) => add_to(*a, g * &self.value(*a).mapv(sigmoid)),
            Op::Square(a) => add_to(*a, g * self.value(*a) * 2.0),
            Op::SumRows(a) => {
                let x = self.value(*a);
                let mut out = Array2::zeros(x.raw_dim());
                for (mut row, gi) in out.outer_iter_mut().zip(g.column(0)) {
                    row.fill(*gi);
                }
                add_to(*a, out);
            }
            Op::SumAll(a) => {
                add_to(*a, Array2::from_elem(self.value(*a).raw_dim(), g[(0, 0)]));
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                let n = x.len() as f64;
                add_to(*a, Array2::from_elem(x.raw_dim(), g[(0, 0)] / n));
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let y = &self.nodes[i].value;
                let mut out = Array2::zeros(x.raw_dim());
                for ((mut orow, xrow), (gi, yi)) in out
                    .outer_iter_mut()
                    .zip(x.outer_iter())
                    .zip(g.column(0).iter().zip(y.column(0).iter()))
                {
                    for (o, xv) in orow.iter_mut().zip(xrow) {
                        *o = gi * (xv - yi).exp();
                    }
                }
                add_to(*a, out);
            }
            Op::ConcatCols(cols) => {
                for (j, &c) in cols.iter().enumerate() {
                    add_to(c, g.column(j).to_owned().insert_axis(Axis(1)));
                }
            }
            Op::MaxScalar(a, b) => {
                if self.scalar(*a) >= self.scalar(*b) {
                    add_to(*a, g.clone());
                } else {
                    add_to(*b, g.clone());
                }
            }
        }
    }
}
