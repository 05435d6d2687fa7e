//! A small reverse-mode differentiation tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep simply walks it in reverse.
//! Scalars are `1x1` matrices.

use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of tape values and gradients.
///
/// `F32` rounds every stored value and every accumulated gradient through
/// `f32`, emulating single-precision storage on top of `f64` kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    fn round(self, m: &mut Matrix) {
        if self == Precision::F32 {
            for v in m.as_mut_slice() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    StandardizeRows(Var, f64),
    L2NormalizeRows(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SqDist(Var, Matrix),
    MaskedCe {
        logits: Var,
        labels: Var,
        rows: Vec<usize>,
    },
    StopGrad,
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `a · bᵀ`
fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.cols(), "matmul_nt inner dims");
    Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum()
    })
}

/// `aᵀ · b`
fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), b.rows(), "matmul_tn inner dims");
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for p in 0..a.rows() {
        let b_row = b.row(p);
        for (i, &av) in a.row(p).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out.row_mut(i).iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Numerically stable `log softmax` of one row.
pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, `None` if it does not
    /// depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.precision.round(&mut value);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .expect("tape matmul shape");
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_nt(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "tape add shape");
        let data = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| x + y)
            .collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `1xC` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.shape(), (1, va.cols()), "tape add_row shape");
        let r = vr.row(0);
        let value = Matrix::from_fn(va.rows(), va.cols(), |i, j| va.get(i, j) + r[j]);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1xC` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.shape(), (1, va.cols()), "tape mul_row shape");
        let r = vr.row(0);
        let value = Matrix::from_fn(va.rows(), va.cols(), |i, j| va.get(i, j) * r[j]);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            softmax_row(va.row(r), value.row_mut(r));
        }
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Per-row `(x - mean) / sqrt(var + eps)` with population variance.
    pub fn standardize_rows(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let n = va.cols() as f64;
        let mut value = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in value.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::StandardizeRows(a, eps), ng)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..va.rows() {
            let norm = row_norm(va.row(r));
            for v in value.row_mut(r) {
                *v /= norm;
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::L2NormalizeRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "tape slice_cols range");
        let value = Matrix::from_fn(va.rows(), len, |i, j| va.get(i, start + j));
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start, len), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "tape concat_cols rows");
            for i in 0..rows {
                value.row_mut(i)[offset..offset + vp.cols()].copy_from_slice(vp.row(i));
            }
            offset += vp.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Squared Euclidean distances from every row of `a` to every row of the
    /// fixed matrix `centers`: output is `rows(a) x rows(centers)`.
    pub fn sq_dist(&mut self, a: Var, centers: &Matrix) -> Var {
        let va = self.value(a);
        assert_eq!(va.cols(), centers.cols(), "tape sq_dist dims");
        let center_norms: Vec<f64> = (0..centers.rows())
            .map(|n| centers.row(n).iter().map(|v| v * v).sum())
            .collect();
        let dots = matmul_nt(va, centers);
        let value = Matrix::from_fn(va.rows(), centers.rows(), |t, n| {
            let un: f64 = va.row(t).iter().map(|v| v * v).sum();
            un - 2.0 * dots.get(t, n) + center_norms[n]
        });
        let ng = self.needs(a);
        self.push(value, Op::SqDist(a, centers.clone()), ng)
    }

    /// `-Σ_{t ∈ rows} labels_tᵀ log softmax(logits_t)` as a `1x1` node.
    pub fn masked_ce(&mut self, logits: Var, labels: Var, rows: &[usize]) -> Var {
        let (vl, vy) = (self.value(logits), self.value(labels));
        assert_eq!(vl.shape(), vy.shape(), "tape masked_ce shape");
        let mut total = 0.0;
        for &t in rows {
            let ls = log_softmax_row(vl.row(t));
            total -= vy.row(t).iter().zip(&ls).map(|(y, l)| y * l).sum::<f64>();
        }
        let ng = self.needs(logits) || self.needs(labels);
        self.push(
            Matrix::filled(1, 1, total),
            Op::MaskedCe {
                logits,
                labels,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    /// Identity in the forward direction, blocks gradient flow.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGrad, false)
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            self.precision.round(&mut g);
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn send(&self, grads: &mut [Option<Matrix>], to: Var, g: Matrix) {
        if self.nodes[to.0].needs_grad {
            accumulate(&mut grads[to.0], g);
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf | Op::Const | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.send(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.needs(*b) {
                    self.send(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    self.send(grads, *a, g.matmul(self.value(*b)).unwrap());
                }
                if self.needs(*b) {
                    self.send(grads, *b, matmul_tn(g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.send(grads, *a, g.clone());
                if self.needs(*row) {
                    let sums = Matrix::from_fn(1, g.cols(), |_, j| {
                        (0..g.rows()).map(|i| g.get(i, j)).sum()
                    });
                    self.send(grads, *row, sums);
                }
            }
            Op::MulRow(a, row) => {
                let va = self.value(*a);
                let vr = self.value(*row);
                if self.needs(*a) {
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * vr.get(0, j));
                    self.send(grads, *a, ga);
                }
                if self.needs(*row) {
                    let gr = Matrix::from_fn(1, g.cols(), |_, j| {
                        (0..g.rows()).map(|i| g.get(i, j) * va.get(i, j)).sum()
                    });
                    self.send(grads, *row, gr);
                }
            }
            Op::Scale(a, s) => self.send(grads, *a, g.map(|v| v * s)),
            Op::Gelu(a) => {
                let va = self.value(*a);
                let data = va
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(&x, &gv)| gv * gelu_grad(x))
                    .collect();
                self.send(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data).unwrap());
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let s = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &sv), &gv) in ga.row_mut(r).iter_mut().zip(s).zip(gr) {
                        *o = sv * (gv - dot);
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::StandardizeRows(a, eps) => {
                let va = self.value(*a);
                let n = va.cols() as f64;
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let row = va.row(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let y = out.row(r);
                    let gr = g.row(r);
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &gv), &yv) in ga.row_mut(r).iter_mut().zip(gr).zip(y) {
                        *o = inv * (gv - g_mean - yv * gy_mean);
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::L2NormalizeRows(a) => {
                let va = self.value(*a);
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let norm = row_norm(va.row(r));
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in ga.row_mut(r).iter_mut().zip(gr).zip(y) {
                        *o = (gv - yv * dot) / norm;
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::SliceCols(a, start, len) => {
                let va = self.value(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    ga.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
                self.send(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs(p) {
                        let gp = Matrix::from_fn(g.rows(), cols, |i, j| g.get(i, offset + j));
                        self.send(grads, p, gp);
                    }
                    offset += cols;
                }
            }
            Op::SqDist(a, centers) => {
                let va = self.value(*a);
                // dA_t = 2 (a_t Σ_n g_tn - Σ_n g_tn c_n)
                let gc = g.matmul(centers).unwrap();
                let ga = Matrix::from_fn(va.rows(), va.cols(), |t, j| {
                    let gsum: f64 = g.row(t).iter().sum();
                    2.0 * (va.get(t, j) * gsum - gc.get(t, j))
                });
                self.send(grads, *a, ga);
            }
            Op::MaskedCe {
                logits,
                labels,
                rows,
            } => {
                let upstream = g.get(0, 0);
                let vl = self.value(*logits);
                let vy = self.value(*labels);
                let (mut gl, mut gy) = (
                    Matrix::zeros(vl.rows(), vl.cols()),
                    Matrix::zeros(vy.rows(), vy.cols()),
                );
                for &t in rows {
                    let ls = log_softmax_row(vl.row(t));
                    let mass: f64 = vy.row(t).iter().sum();
                    for n in 0..vl.cols() {
                        gl.set(t, n, upstream * (ls[n].exp() * mass - vy.get(t, n)));
                        gy.set(t, n, -upstream * ls[n]);
                    }
                }
                if self.needs(*logits) {
                    self.send(grads, *logits, gl);
                }
                if self.needs(*labels) {
                    self.send(grads, *labels, gy);
                }
            }
        }
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)
}
