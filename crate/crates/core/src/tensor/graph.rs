//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its
//! forward value, and [`Graph::backward`] walks the tape in reverse. The
//! tape is rebuilt for every forward pass, so there is no retained state
//! between training steps beyond the parameter values themselves.

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `a (r×c) + b (1×c)` with `b` broadcast over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    MeanRows(Var),
    RepeatRows(Var),
    NormalizeRows(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn add_into(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies the current value of `v` into a new constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.derived(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.derived(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.derived(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.derived(value, Op::Add(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: bias must be 1×{c}");
        let value = self.value(a) + self.value(row);
        self.derived(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.derived(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.derived(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.derived(value, Op::Scale(a, k), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.derived(value, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.derived(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.derived(value, Op::Sigmoid(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.derived(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.derived(value, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.derived(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.derived(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.derived(value, Op::SliceCols(a, start, end), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.derived(value, Op::SliceRows(a, start, end), &[a])
    }

    /// Arithmetic mean over rows: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        self.derived(value, Op::MeanRows(a), &[a])
    }

    /// `1×c → n×c`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let row = self.value(a);
        assert_eq!(row.nrows(), 1, "repeat_rows expects a single row");
        let value = row
            .broadcast((n, row.ncols()))
            .expect("broadcast")
            .to_owned();
        self.derived(value, Op::RepeatRows(a), &[a])
    }

    /// Divides every row by its L2 norm. Rows must be nonzero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        self.derived(value, Op::NormalizeRows(a), &[a])
    }

    /// Sum of all entries as a 1×1 matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.derived(value, Op::Sum(a), &[a])
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    /// Backpropagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if needs(a) {
                        add_into(&mut grads[a.0], dy.dot(&self.value(*b).t()));
                    }
                    if needs(b) {
                        add_into(&mut grads[b.0], self.value(*a).t().dot(&dy));
                    }
                }
                Op::MatMulT(a, b) => {
                    if needs(a) {
                        add_into(&mut grads[a.0], dy.dot(self.value(*b)));
                    }
                    if needs(b) {
                        add_into(&mut grads[b.0], dy.t().dot(self.value(*a)));
                    }
                }
                Op::Transpose(a) => {
                    add_into(&mut grads[a.0], dy.t().to_owned());
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        add_into(&mut grads[a.0], dy.clone());
                    }
                    if needs(b) {
                        add_into(&mut grads[b.0], dy);
                    }
                }
                Op::AddRow(a, row) => {
                    if needs(row) {
                        let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                        add_into(&mut grads[row.0], db);
                    }
                    if needs(a) {
                        add_into(&mut grads[a.0], dy);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(b) {
                        add_into(&mut grads[b.0], -&dy);
                    }
                    if needs(a) {
                        add_into(&mut grads[a.0], dy);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        add_into(&mut grads[a.0], &dy * self.value(*b));
                    }
                    if needs(b) {
                        add_into(&mut grads[b.0], &dy * self.value(*a));
                    }
                }
                Op::Scale(a, k) => add_into(&mut grads[a.0], dy * *k),
                Op::Tanh(a) => {
                    let y = &node.value;
                    add_into(&mut grads[a.0], &dy * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut dx = dy;
                    dx.zip_mut_with(x, |d, &xv| {
                        if xv <= 0.0 {
                            *d = 0.0
                        }
                    });
                    add_into(&mut grads[a.0], dx);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    add_into(&mut grads[a.0], &dy * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&dy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    add_into(&mut grads[a.0], y * &(&dy - &dot));
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(f64::exp);
                    let total = dy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    add_into(&mut grads[a.0], &dy - &(&p * &total));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if needs(p) {
                            let piece = dy.slice(s![.., start..start + w]).to_owned();
                            add_into(&mut grads[p.0], piece);
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        if needs(p) {
                            let piece = dy.slice(s![start..start + h, ..]).to_owned();
                            add_into(&mut grads[p.0], piece);
                        }
                        start += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut dx = Array2::zeros(self.shape(*a));
                    dx.slice_mut(s![.., *start..*end]).assign(&dy);
                    add_into(&mut grads[a.0], dx);
                }
                Op::SliceRows(a, start, end) => {
                    let mut dx = Array2::zeros(self.shape(*a));
                    dx.slice_mut(s![*start..*end, ..]).assign(&dy);
                    add_into(&mut grads[a.0], dx);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let dx = dy
                        .broadcast((r, c))
                        .expect("broadcast")
                        .mapv(|d| d / r as f64);
                    add_into(&mut grads[a.0], dx);
                }
                Op::RepeatRows(a) => {
                    add_into(&mut grads[a.0], dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut dx = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let xr = x.row(i);
                        let yr = y.row(i);
                        let dr = dy.row(i);
                        let n = xr.dot(&xr).sqrt();
                        let proj = yr.dot(&dr);
                        let mut out = dx.row_mut(i);
                        for j in 0..xr.len() {
                            out[j] = (dr[j] - yr[j] * proj) / n;
                        }
                    }
                    add_into(&mut grads[a.0], dx);
                }
                Op::Sum(a) => {
                    let g = dy[[0, 0]];
                    add_into(&mut grads[a.0], Array2::from_elem(self.shape(*a), g));
                }
            }
        }
        Gradients { grads }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    out
}

pub fn log_softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}
