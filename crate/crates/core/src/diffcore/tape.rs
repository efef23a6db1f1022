//! Append-only computation graph with differentiable backward passes.
//!
//! Every primitive records its inputs; [`Tape::grad`] walks the records in
//! reverse and emits the vector-Jacobian products as *new* records on the
//! same tape. Gradients are therefore ordinary graph values and can be
//! differentiated again, which is how input-gradient and Hessian penalties
//! get their parameter gradients.

use super::activation::Activation;
use super::tensor::{matmul, Tensor};
use super::DiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    AddRow { x: Var, bias: Var },
    SumRows(Var),
    BroadcastRows { x: Var },
    SumCols(Var),
    BroadcastCols { x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act { x: Var, act: Activation, order: u8 },
    PosPart(Var),
    SumAll(Var),
    BroadcastAll { x: Var },
    SelectCols { x: Var, cols: Vec<usize> },
    ScatterCols { x: Var, cols: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::MatMul { a, b, .. } => [Some(a), Some(b)],
            Op::AddRow { x, bias } => [Some(x), Some(bias)],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => [Some(a), Some(b)],
            Op::SumRows(x)
            | Op::BroadcastRows { x }
            | Op::SumCols(x)
            | Op::BroadcastCols { x }
            | Op::Scale(x, _)
            | Op::Act { x, .. }
            | Op::PosPart(x)
            | Op::SumAll(x)
            | Op::BroadcastAll { x }
            | Op::SelectCols { x, .. }
            | Op::ScatterCols { x, .. } => [Some(x), None],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::AddRow { .. } => "add_row",
            Op::SumRows(_) => "sum_rows",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::SumCols(_) => "sum_cols",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Act { .. } => "activation",
            Op::PosPart(_) => "pos_part",
            Op::SumAll(_) => "sum",
            Op::BroadcastAll { .. } => "broadcast",
            Op::SelectCols { .. } => "select_cols",
            Op::ScatterCols { .. } => "scatter_cols",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that gradients can be taken with respect to (parameters and
    /// differentiated inputs alike).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn check(&self, v: Var) -> Result<(), DiffError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(DiffError::UnknownVar(v.0))
        }
    }

    fn record(&mut self, value: Tensor, op: Op) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        let requires_grad =
            op.inputs().iter().flatten().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::ShapeMismatch { op, left: sa, right: sb });
        }
        Ok(())
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var, DiffError> {
        self.check(a)?;
        self.check(b)?;
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let k_a = if trans_a { ar } else { ac };
        let k_b = if trans_b { bc } else { br };
        if k_a != k_b {
            return Err(DiffError::ShapeMismatch { op: "matmul", left: (ar, ac), right: (br, bc) });
        }
        let value = matmul(self.value(a), self.value(b), trans_a, trans_b);
        self.record(value, Op::MatMul { a, b, trans_a, trans_b })
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        self.check(bias)?;
        let (m, n) = self.shape(x);
        if self.shape(bias) != (1, n) {
            return Err(DiffError::ShapeMismatch { op: "add_row", left: (m, n), right: self.shape(bias) });
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n.max(1)) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.record(value, Op::AddRow { x, bias })
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        let src = self.value(x);
        let (m, n) = src.shape();
        let mut value = Tensor::zeros(1, n);
        for r in 0..m {
            for (acc, v) in value.data_mut().iter_mut().zip(src.row_slice(r)) {
                *acc += v;
            }
        }
        self.record(value, Op::SumRows(x))
    }

    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var, DiffError> {
        self.check(x)?;
        let src = self.value(x);
        if src.rows() != 1 {
            return Err(DiffError::ShapeMismatch { op: "broadcast_rows", left: src.shape(), right: (1, src.cols()) });
        }
        let n = src.cols();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(src.data());
        }
        self.record(Tensor::from_vec(rows, n, data), Op::BroadcastRows { x })
    }

    pub fn sum_cols(&mut self, x: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        let src = self.value(x);
        let m = src.rows();
        let data = (0..m).map(|r| src.row_slice(r).iter().sum()).collect();
        self.record(Tensor::from_vec(m, 1, data), Op::SumCols(x))
    }

    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var, DiffError> {
        self.check(x)?;
        let src = self.value(x);
        if src.cols() != 1 {
            return Err(DiffError::ShapeMismatch { op: "broadcast_cols", left: src.shape(), right: (src.rows(), 1) });
        }
        let m = src.rows();
        let mut data = Vec::with_capacity(m * cols);
        for &v in src.data() {
            data.extend(std::iter::repeat_n(v, cols));
        }
        self.record(Tensor::from_vec(m, cols, data), Op::BroadcastCols { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.record(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.record(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        self.check(x)?;
        let value = self.value(x).map(|v| c * v);
        self.record(value, Op::Scale(x, c))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var, DiffError> {
        self.activation_derivative(x, act, 0)
    }

    /// Elementwise `order`-th derivative of the activation.
    pub fn activation_derivative(&mut self, x: Var, act: Activation, order: u8) -> Result<Var, DiffError> {
        self.check(x)?;
        let value = self.value(x).map(|v| act.eval(v, order));
        self.record(value, Op::Act { x, act, order })
    }

    /// `max(0, x)` elementwise.
    pub fn pos_part(&mut self, x: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        let value = self.value(x).map(|v| v.max(0.0));
        self.record(value, Op::PosPart(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        let value = Tensor::scalar(self.value(x).sum());
        self.record(value, Op::SumAll(x))
    }

    pub fn broadcast(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, DiffError> {
        self.check(x)?;
        if self.shape(x) != (1, 1) {
            return Err(DiffError::NotScalar { shape: self.shape(x) });
        }
        let value = Tensor::filled(rows, cols, self.scalar_value(x));
        self.record(value, Op::BroadcastAll { x })
    }

    /// Gathers the listed columns, in order.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var, DiffError> {
        self.check(x)?;
        let src = self.value(x);
        let (m, n) = src.shape();
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(DiffError::IndexOutOfRange { index: bad, len: n });
        }
        let mut value = Tensor::zeros(m, cols.len());
        for r in 0..m {
            for (j, &c) in cols.iter().enumerate() {
                value.set(r, j, src.get(r, c));
            }
        }
        self.record(value, Op::SelectCols { x, cols: cols.to_vec() })
    }

    /// Inverse of [`Tape::select_cols`]: places the columns of `x` at `cols`
    /// in a zero matrix of width `total`.
    pub fn scatter_cols(&mut self, x: Var, cols: &[usize], total: usize) -> Result<Var, DiffError> {
        self.check(x)?;
        let src = self.value(x);
        let m = src.rows();
        if src.cols() != cols.len() {
            return Err(DiffError::ShapeMismatch { op: "scatter_cols", left: src.shape(), right: (m, cols.len()) });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= total) {
            return Err(DiffError::IndexOutOfRange { index: bad, len: total });
        }
        let mut value = Tensor::zeros(m, total);
        for r in 0..m {
            for (j, &c) in cols.iter().enumerate() {
                value.set(r, c, value.get(r, c) + src.get(r, j));
            }
        }
        self.record(value, Op::ScatterCols { x, cols: cols.to_vec() })
    }

    // ---- composites -------------------------------------------------------

    /// `x Wᵀ + b` with `W` stored as `out × in` and `b` as `1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let xw = self.matmul(x, w, false, true)?;
        self.add_row(xw, b)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, DiffError> {
        self.mul(x, x)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(DiffError::Empty { op: "mean" });
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---- reverse mode -----------------------------------------------------

    /// Gradients of the scalar `y` with respect to each of `wrt`.
    ///
    /// The returned handles live on this tape, so they can be fed back into
    /// further computations and differentiated again.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Result<Vec<Var>, DiffError> {
        self.check(y)?;
        for &w in wrt {
            self.check(w)?;
        }
        if self.shape(y) != (1, 1) {
            return Err(DiffError::NotScalar { shape: self.shape(y) });
        }
        let n = y.0 + 1;

        // Only nodes downstream of a requested variable need adjoints.
        let mut relevant = vec![false; n];
        for &w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] && self.nodes[i].requires_grad {
                relevant[i] = self.nodes[i].op.inputs().iter().flatten().any(|v| relevant[v.0]);
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        if relevant[y.0] {
            adj[y.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b, trans_a, trans_b } => {
                    if relevant[a.0] {
                        let da = if trans_a {
                            self.matmul(b, g, trans_b, true)?
                        } else {
                            self.matmul(g, b, false, !trans_b)?
                        };
                        self.accumulate(&mut adj, a, da)?;
                    }
                    if relevant[b.0] {
                        let db = if trans_b {
                            self.matmul(g, a, true, trans_a)?
                        } else {
                            self.matmul(a, g, !trans_a, false)?
                        };
                        self.accumulate(&mut adj, b, db)?;
                    }
                }
                Op::AddRow { x, bias } => {
                    if relevant[x.0] {
                        self.accumulate(&mut adj, x, g)?;
                    }
                    if relevant[bias.0] {
                        let db = self.sum_rows(g)?;
                        self.accumulate(&mut adj, bias, db)?;
                    }
                }
                Op::SumRows(x) => {
                    let rows = self.shape(x).0;
                    let dx = self.broadcast_rows(g, rows)?;
                    self.accumulate(&mut adj, x, dx)?;
                }
                Op::BroadcastRows { x } => {
                    let dx = self.sum_rows(g)?;
                    self.accumulate(&mut adj, x, dx)?;
                }
                Op::SumCols(x) => {
                    let cols = self.shape(x).1;
                    let dx = self.broadcast_cols(g, cols)?;
                    self.accumulate(&mut adj, x, dx)?;
                }
                Op::BroadcastCols { x } => {
                    let dx = self.sum_cols(g)?;
                    self.accumulate(&mut adj, x, dx)?;
                }
                Op::Add(a, b) => {
                    if relevant[a.0] {
                        self.accumulate(&mut adj, a, g)?;
                    }
                    if relevant[b.0] {
                        self.accumulate(&mut adj, b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if relevant[a.0] {
                        self.accumulate(&mut adj, a, g)?;
                    }
                    if relevant[b.0] {
                        let db = self.scale(g, -1.0)?;
                        self.accumulate(&mut adj, b, db)?;
                    }
                }
                Op::Mul(a, b) => {
                    if relevant[a.0] {
                        let da = self.mul(g, b)?;
                        self.accumulate(&mut adj, a, da)?;
                    }
                    if relevant[b.0] {
                        let db = self.mul(g, a)?;
                        self.accumulate(&mut adj, b, db)?;
                    }
                }
                Op::Scale(x, c) => {
                    let dx = self.scale(g, c)?;
                    self.accumulate(&mut adj, x, dx)?;
                }
                Op::Act { x, act, order } => {
                    // Piecewise-linear activations have no curvature to pass on.
                    if !act.vanishes_from(order + 1) {
                        let d = self.activation_derivative(x, act, order + 1)?;
                        let dx = self.mul(g, d)?;
                        self.accumulate(&mut adj, x, dx)?;
                    }
                }
                Op::PosPart(x) => {
                    let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let mask = self.constant(mask);
                    let dx = self.mul(g, mask)?;
                    self.accumulate(&mut adj, x, dx)?;
                }
                Op::SumAll(x) => {
                    let (r, c) = self.shape(x);
                    let dx = self.broadcast(g, r, c)?;
                    self.accumulate(&mut adj, x, dx)?;
                }
                Op::BroadcastAll { x } => {
                    let dx = self.sum(g)?;
                    self.accumulate(&mut adj, x, dx)?;
                }
                Op::SelectCols { x, cols } => {
                    let total = self.shape(x).1;
                    let dx = self.scatter_cols(g, &cols, total)?;
                    self.accumulate(&mut adj, x, dx)?;
                }
                Op::ScatterCols { x, cols } => {
                    let dx = self.select_cols(g, &cols)?;
                    self.accumulate(&mut adj, x, dx)?;
                }
            }
        }

        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let (r, c) = self.shape(w);
                    Ok(self.constant(Tensor::zeros(r, c)))
                }
            })
            .collect()
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contribution: Var) -> Result<(), DiffError> {
        adj[target.0] = Some(match adj[target.0] {
            Some(prev) => self.add(prev, contribution)?,
            None => contribution,
        });
        Ok(())
    }
}
