//! A small reverse-mode tape over dense matrices.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep visits
//! every node after all of its consumers. Only the operations the toy encoder
//! needs are provided.

use crate::error::Result;
use crate::kernel::KernelParams;
use crate::matrix::{softmax_in_place, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a × bᵀ`
    MatMulTransposed(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × c` row to every row.
    AddRow(Var, Var),
    /// Multiplies every row elementwise by a `1 × c` row.
    MulRow(Var, Var),
    Scale(Var, f64),
    /// Adds a constant matrix (e.g. an attention mask); no gradient flows to it.
    AddConst(Var),
    Softmax(Var),
    /// Per-row standardization; stores `1/σ` for each row.
    NormalizeRows(Var, Vec<f64>),
    Gelu(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    /// Row lookup into an embedding table.
    Gather(Var, Vec<usize>),
    /// `n × n` Toeplitz scores from a `1 × 3S` flattened kernel row.
    Toeplitz(Var, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
    },
    /// `Σ a ⊙ w` for a constant `w`.
    WeightedSum(Var, Matrix),
    /// Sum of several `1 × 1` nodes.
    SumScalars(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub const NORM_EPS: f64 = 1e-5;

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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_transpose(self.value(b))?;
        Ok(self.push(value, Op::MatMulTransposed(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let r = self.value(row);
        let x = self.value(a);
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(x.shape_error("add_row", r));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let r = self.value(row);
        let x = self.value(a);
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(x.shape_error("mul_row", r));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, g) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *v *= g;
            }
        }
        Ok(self.push(value, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Divides by `divisor` (kept separate from `scale` so results match the
    /// plain attention routines bit for bit).
    pub fn div(&mut self, a: Var, divisor: f64) -> Var {
        let value = self.value(a).map(|v| v / divisor);
        self.push(value, Op::Scale(a, 1.0 / divisor))
    }

    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != c.shape() {
            return Err(x.shape_error("add_const", c));
        }
        let mut value = x.clone();
        for (v, m) in value.as_mut_slice().iter_mut().zip(c.as_slice()) {
            *v += m;
        }
        Ok(self.push(value, Op::AddConst(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.push(value, Op::Softmax(a))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        let c = x.cols() as f64;
        for i in 0..x.rows() {
            let row = value.row_mut(i);
            let mean = row.iter().sum::<f64>() / c;
            row.iter_mut().for_each(|v| *v -= mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / c;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v *= r);
            inv_std.push(r);
        }
        self.push(value, Op::NormalizeRows(a, inv_std))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        Ok(self.push(value, Op::SliceRows(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.value(parts[0]).shape_error("concat_cols", self.value(p)));
            }
        }
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut at = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                value.row_mut(i)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(crate::error::Error::OutOfBounds {
                index: bad,
                len: t.rows(),
            });
        }
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(value, Op::Gather(table, ids.to_vec())))
    }

    /// Materializes the scores of a flattened kernel row for length `n`.
    pub fn toeplitz(&mut self, kernel_row: Var, n: usize) -> Result<Var> {
        let params = KernelParams::from_flat(self.value(kernel_row).as_slice(), 0, 0)?;
        let value = params.materialize(n);
        Ok(self.push(value, Op::Toeplitz(kernel_row, n)))
    }

    /// Mean token cross-entropy over positions with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let l = self.value(logits);
        if l.rows() != targets.len() {
            return Err(crate::error::Error::Shape {
                op: "cross_entropy",
                left: l.shape(),
                right: (targets.len(), l.cols()),
            });
        }
        let probs = l.softmax_rows();
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= l.cols() {
                    return Err(crate::error::Error::OutOfBounds {
                        index: t,
                        len: l.cols(),
                    });
                }
                // log-softmax directly for accuracy
                let row = l.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        Ok(self.push(
            Matrix::from_rows(&[[loss]]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn weighted_sum(&mut self, a: Var, weights: &Matrix) -> Result<Var> {
        let total = self.value(a).hadamard(weights)?.sum();
        Ok(self.push(Matrix::from_rows(&[[total]]), Op::WeightedSum(a, weights.clone())))
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|&p| self.scalar(p)).sum::<f64>();
        self.push(Matrix::from_rows(&[[total]]), Op::SumScalars(parts.to_vec()))
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::from_rows(&[[1.0]]));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_transpose(self.value(*b)).expect("shapes");
                    let gb = self.value(*a).transpose_matmul(&g).expect("shapes");
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulTransposed(a, b) => {
                    let ga = g.matmul(self.value(*b)).expect("shapes");
                    let gb = g.transpose_matmul(self.value(*a)).expect("shapes");
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let gr = Matrix::row_vector(&g.column_sums());
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, gr);
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row);
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    let mut gr = vec![0.0; r.cols()];
                    for i in 0..g.rows() {
                        for (j, v) in ga.row_mut(i).iter_mut().enumerate() {
                            gr[j] += *v * x.get(i, j);
                            *v *= r.get(0, j);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, Matrix::row_vector(&gr));
                }
                Op::Scale(a, factor) => accumulate(&mut grads, *a, g.scale(*factor)),
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = ga.row_mut(i);
                        let inner: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a, inv_std) => {
                    let y = &node.value;
                    let c = y.cols() as f64;
                    let mut ga = g;
                    for (i, &scale) in inv_std.iter().enumerate() {
                        let yr = y.row(i);
                        let gr = ga.row_mut(i);
                        let mean_g = gr.iter().sum::<f64>() / c;
                        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c;
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = scale * (*gv - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * gelu_derivative(x.get(i, j)));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        ga.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let gp = g.slice_cols(at, w).expect("in range");
                        at += w;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Toeplitz(kernel_row, n) => {
                    let n = *n;
                    let mut per_offset = vec![0.0; 2 * n - 1];
                    for i in 0..n {
                        for j in 0..n {
                            per_offset[j + n - 1 - i] += g.get(i, j);
                        }
                    }
                    let row = self.value(*kernel_row);
                    let params = KernelParams::from_flat(row.as_slice(), 0, 0).expect("triples");
                    let mut gk = vec![0.0; row.cols()];
                    for (idx, &u) in per_offset.iter().enumerate() {
                        let k = idx as i64 - (n as i64 - 1);
                        for (s, kg) in params.gradients(k, u).iter().enumerate() {
                            gk[3 * s] += kg.amplitude;
                            gk[3 * s + 1] += kg.width;
                            gk[3 * s + 2] += kg.center;
                        }
                    }
                    accumulate(&mut grads, *kernel_row, Matrix::row_vector(&gk));
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let count = targets.iter().filter(|t| t.is_some()).count();
                    let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                    if count > 0 {
                        let scale = g.get(0, 0) / count as f64;
                        for (i, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                let row = gl.row_mut(i);
                                row.copy_from_slice(probs.row(i));
                                row[t] -= 1.0;
                                row.iter_mut().for_each(|v| *v *= scale);
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::WeightedSum(a, w) => accumulate(&mut grads, *a, w.scale(g.get(0, 0))),
                Op::SumScalars(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, p, g.clone());
                    }
                }
            }
        }

        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g).expect("gradient shapes match"),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of leaves after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Softmax of a single row; exposed for prediction code.
pub fn softmax_vec(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}
