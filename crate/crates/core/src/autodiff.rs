//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse creation order and
//! accumulates gradients only into nodes that depend on a variable leaf, so
//! frozen parameters inserted as constants never receive gradient buffers.
//!
//! Every tensor is a 2-D matrix. Spatial maps use one row per pixel in
//! row-major `(y, x)` order and one column per channel.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-sparse constant matrix used for resampling (resize, pooling, upsampling).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    rows: usize,
    cols: usize,
    entries: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(cols: usize, entries: Vec<Vec<(usize, f64)>>) -> Self {
        assert!(
            entries.iter().flatten().all(|&(c, _)| c < cols),
            "sparse column index out of range"
        );
        Self {
            rows: entries.len(),
            cols,
            entries,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(n, (0..n).map(|i| vec![(i, 1.0)]).collect())
    }

    /// Kronecker product `a ⊗ b`: row `ra * b.rows + rb`, column `ca * b.cols + cb`.
    pub fn kron(a: &SparseRows, b: &SparseRows) -> Self {
        let mut entries = Vec::with_capacity(a.rows * b.rows);
        for arow in &a.entries {
            for brow in &b.entries {
                let mut row = Vec::with_capacity(arow.len() * brow.len());
                for &(ca, wa) in arow {
                    for &(cb, wb) in brow {
                        row.push((ca * b.cols + cb, wa * wb));
                    }
                }
                entries.push(row);
            }
        }
        Self::new(a.cols * b.cols, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.entries[r]
    }

    /// `self · x`
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.cols, "sparse apply shape mismatch");
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for (r, row) in self.entries.iter().enumerate() {
            let mut dst = out.row_mut(r);
            for &(c, w) in row {
                dst.scaled_add(w, &x.row(c));
            }
        }
        out
    }

    /// `selfᵀ · g`
    pub fn apply_transpose(&self, g: &Array2<f64>) -> Array2<f64> {
        assert_eq!(g.nrows(), self.rows, "sparse transpose shape mismatch");
        let mut out = Array2::zeros((self.cols, g.ncols()));
        for (r, row) in self.entries.iter().enumerate() {
            let src = g.row(r);
            for &(c, w) in row {
                out.row_mut(c).scaled_add(w, &src);
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for (r, row) in self.entries.iter().enumerate() {
            for &(c, w) in row {
                out[[r, c]] += w;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    Silu(Var),
    SparseLeft(Arc<SparseRows>, Var),
    Columns(Var, usize),
    ConcatColumns(Vec<Var>),
    ScaleColumns(Var, Vec<f64>),
    Mean(Vec<Var>),
    SumAll(Var),
    SquaredErrorSum(Var, Arc<Array2<f64>>),
    SquaredErrorMean(Var, Arc<Array2<f64>>),
    WeightedCrossEntropy {
        input: Var,
        labels: Arc<Vec<usize>>,
        weights: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needs them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
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

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
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

    /// Inserts a value that never receives gradients.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a differentiable leaf.
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.dim(), (1, 1), "not a scalar node");
        value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulNT(a, b), ng)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).t().dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulTN(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "row broadcast shape mismatch");
        let value = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        let ng = self.needs(a);
        self.push(value, Op::LayerNormRows(a, eps), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(value, Op::Silu(a), ng)
    }

    /// `matrix · a`
    pub fn sparse_left(&mut self, matrix: Arc<SparseRows>, a: Var) -> Var {
        let value = matrix.apply(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::SparseLeft(matrix, a), ng)
    }

    /// Columns `[start, end)` of `a`.
    pub fn columns(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(
            start <= end && end <= self.shape(a).1,
            "column range out of bounds"
        );
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.needs(a);
        self.push(value, Op::Columns(a, start), ng)
    }

    pub fn concat_columns(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat rows mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatColumns(parts.to_vec()), ng)
    }

    /// Multiplies column `j` by the constant `factors[j]`.
    pub fn scale_columns(&mut self, a: Var, factors: Vec<f64>) -> Var {
        assert_eq!(
            factors.len(),
            self.shape(a).1,
            "column factor count mismatch"
        );
        let mut value = self.value(a).clone();
        for (mut col, &f) in value.columns_mut().into_iter().zip(&factors) {
            col *= f;
        }
        let ng = self.needs(a);
        self.push(value, Op::ScaleColumns(a, factors), ng)
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean of nothing");
        let shape = self.shape(parts[0]);
        let mut value = Array2::zeros(shape);
        for &p in parts {
            assert_eq!(self.shape(p), shape, "mean shape mismatch");
            value += self.value(p);
        }
        value /= parts.len() as f64;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::Mean(parts.to_vec()), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// `Σ (a − target)²`
    pub fn squared_error_sum(&mut self, a: Var, target: Arc<Array2<f64>>) -> Var {
        assert_eq!(self.shape(a), target.dim(), "target shape mismatch");
        let total = Zip::from(self.value(a))
            .and(&*target)
            .fold(0.0, |acc, &x, &t| acc + (x - t) * (x - t));
        let ng = self.needs(a);
        self.push(
            Array2::from_elem((1, 1), total),
            Op::SquaredErrorSum(a, target),
            ng,
        )
    }

    /// `mean (a − target)²`
    pub fn squared_error_mean(&mut self, a: Var, target: Arc<Array2<f64>>) -> Var {
        assert_eq!(self.shape(a), target.dim(), "target shape mismatch");
        let n = target.len().max(1) as f64;
        let total = Zip::from(self.value(a))
            .and(&*target)
            .fold(0.0, |acc, &x, &t| acc + (x - t) * (x - t));
        let ng = self.needs(a);
        self.push(
            Array2::from_elem((1, 1), total / n),
            Op::SquaredErrorMean(a, target),
            ng,
        )
    }

    /// Class-weighted cross-entropy with per-row renormalization.
    ///
    /// Row `i` of `input` holds non-negative scores over `K` classes. Scores are
    /// divided by their row sum (clamped below at `eps`), the probability of the
    /// labelled class is clamped below at `eps`, and the loss is
    /// `mean_i weights[label_i] · (−ln p_i)`.
    pub fn weighted_cross_entropy(
        &mut self,
        input: Var,
        labels: Arc<Vec<usize>>,
        weights: Vec<f64>,
        eps: f64,
    ) -> Var {
        let (rows, k) = self.shape(input);
        assert_eq!(labels.len(), rows, "one label per row required");
        assert_eq!(weights.len(), k, "one weight per class required");
        let a = self.value(input);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            assert!(label < k, "label out of range");
            let row = a.row(i);
            let sum = row.sum().max(eps);
            let p = (row[label] / sum).max(eps);
            total -= weights[label] * p.ln();
        }
        let value = Array2::from_elem((1, 1), total / rows.max(1) as f64);
        let ng = self.needs(input);
        self.push(
            value,
            Op::WeightedCrossEntropy {
                input,
                labels,
                weights,
                eps,
            },
            ng,
        )
    }

    /// Gradients of the scalar `root` with respect to every node that needs them.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.dot(self.value(*b)));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.t().dot(self.value(*a)));
                    }
                }
                Op::MatMulTN(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], self.value(*b).dot(&g.t()));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], self.value(*a).dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g * *c),
                Op::SoftmaxRows(a) => {
                    let mut gx = &g * y;
                    for (mut gx_row, y_row) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = gx_row.sum();
                        gx_row.scaled_add(-dot, &y_row);
                    }
                    accumulate(&mut grads[a.0], gx);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = self.value(*a);
                    let mut gx = Array2::zeros(x.dim());
                    let n = x.ncols() as f64;
                    for ((mut gx_row, x_row), (g_row, y_row)) in gx
                        .rows_mut()
                        .into_iter()
                        .zip(x.rows())
                        .zip(g.rows().into_iter().zip(y.rows()))
                    {
                        let mean = x_row.sum() / n;
                        let var = x_row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = g_row.sum() / n;
                        let gy_mean = g_row.dot(&y_row) / n;
                        Zip::from(&mut gx_row)
                            .and(&g_row)
                            .and(&y_row)
                            .for_each(|o, &gv, &yv| *o = inv * (gv - g_mean - yv * gy_mean));
                    }
                    accumulate(&mut grads[a.0], gx);
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut gx = g;
                    Zip::from(&mut gx).and(x).for_each(|o, &xv| {
                        let sig = 1.0 / (1.0 + (-xv).exp());
                        *o *= sig * (1.0 + xv * (1.0 - sig));
                    });
                    accumulate(&mut grads[a.0], gx);
                }
                Op::SparseLeft(matrix, a) => {
                    accumulate(&mut grads[a.0], matrix.apply_transpose(&g));
                }
                Op::Columns(a, start) => {
                    let mut gx = Array2::zeros(self.shape(*a));
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[a.0], gx);
                }
                Op::ConcatColumns(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let width = self.shape(*p).1;
                        if self.needs(*p) {
                            let part = g.slice(s![.., offset..offset + width]).to_owned();
                            accumulate(&mut grads[p.0], part);
                        }
                        offset += width;
                    }
                }
                Op::ScaleColumns(a, factors) => {
                    let mut gx = g;
                    for (mut col, &f) in gx.columns_mut().into_iter().zip(factors) {
                        col *= f;
                    }
                    accumulate(&mut grads[a.0], gx);
                }
                Op::Mean(parts) => {
                    let share = &g / parts.len() as f64;
                    for p in parts {
                        if self.needs(*p) {
                            accumulate(&mut grads[p.0], share.clone());
                        }
                    }
                }
                Op::SumAll(a) => {
                    let gx = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads[a.0], gx);
                }
                Op::SquaredErrorSum(a, target) => {
                    let scale = 2.0 * g[[0, 0]];
                    let gx = (self.value(*a) - &**target) * scale;
                    accumulate(&mut grads[a.0], gx);
                }
                Op::SquaredErrorMean(a, target) => {
                    let scale = 2.0 * g[[0, 0]] / target.len().max(1) as f64;
                    let gx = (self.value(*a) - &**target) * scale;
                    accumulate(&mut grads[a.0], gx);
                }
                Op::WeightedCrossEntropy {
                    input,
                    labels,
                    weights,
                    eps,
                } => {
                    let a = self.value(*input);
                    let rows = a.nrows().max(1) as f64;
                    let upstream = g[[0, 0]];
                    let mut gx = Array2::zeros(a.dim());
                    for (i, &label) in labels.iter().enumerate() {
                        let row = a.row(i);
                        let raw_sum = row.sum();
                        let sum = raw_sum.max(*eps);
                        let p = row[label] / sum;
                        if p <= *eps {
                            continue;
                        }
                        let coeff = upstream * weights[label] / rows;
                        let mut gx_row = gx.row_mut(i);
                        if raw_sum > *eps {
                            gx_row.fill(coeff / raw_sum);
                        }
                        gx_row[label] -= coeff / row[label];
                    }
                    accumulate(&mut grads[input.0], gx);
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `build` with respect to its single input.
    fn check_gradient(input: Array2<f64>, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.variable(input.clone());
        let out = build(&mut g, x);
        let analytic = g.backward(out).wrt(x).cloned().unwrap();
        let h = 1e-6;
        for idx in 0..input.len() {
            let (r, c) = (idx / input.ncols(), idx % input.ncols());
            let eval = |delta: f64| {
                let mut p = input.clone();
                p[[r, c]] += delta;
                let mut g = Graph::new();
                let x = g.constant(p);
                let out = build(&mut g, x);
                g.scalar(out)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            let err = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-6);
            assert!(
                err < 1e-5,
                "gradient mismatch at ({r},{c}): {a} vs {numeric}"
            );
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 4, 3);
        let c = random(&mut rng, 5, 3);
        let t = Arc::new(random(&mut rng, 5, 5));
        check_gradient(random(&mut rng, 5, 4), move |g, x| {
            let b = g.constant(b.clone());
            let c = g.constant(c.clone());
            let xb = g.matmul(x, b);
            let y = g.matmul_nt(xb, c);
            let z = g.matmul_tn(y, x);
            let w = g.matmul(y, z);
            let _ = w;
            g.squared_error_sum(y, t.clone())
        });
    }

    #[test]
    fn softmax_layernorm_silu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Arc::new(random(&mut rng, 3, 6));
        check_gradient(random(&mut rng, 3, 6), move |g, x| {
            let n = g.layer_norm_rows(x, 1e-5);
            let s = g.silu(n);
            let p = g.softmax_rows(s);
            let m = g.mul(p, x);
            g.squared_error_mean(m, t.clone())
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bias = random(&mut rng, 1, 4);
        let sparse = Arc::new(SparseRows::new(
            3,
            vec![
                vec![(0, 0.5), (2, 0.5)],
                vec![(1, 1.0)],
                vec![],
                vec![(2, 0.25)],
            ],
        ));
        check_gradient(random(&mut rng, 3, 4), move |g, x| {
            let b = g.constant(bias.clone());
            let y = g.add_row(x, b);
            let up = g.sparse_left(sparse.clone(), y);
            let left = g.columns(up, 0, 2);
            let right = g.columns(up, 2, 4);
            let cat = g.concat_columns(&[right, left]);
            let scaled = g.scale_columns(cat, vec![1.0, 0.0, 2.0, -1.0]);
            let sq = g.mul(scaled, scaled);
            let avg = g.mean(&[sq, up]);
            let d = g.sub(avg, up);
            let e = g.scale(d, 3.0);
            let f = g.add(e, up);
            g.sum_all(f)
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels = Arc::new(vec![0, 2, 1, 2, 0]);
        let input = random(&mut rng, 5, 3).mapv(|v| v.abs() + 0.05);
        check_gradient(input, move |g, x| {
            g.weighted_cross_entropy(x, labels.clone(), vec![2.5, 5.0, 2.5], 1e-8)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Array2::ones((2, 2)));
        let v = g.variable(Array2::ones((2, 2)));
        let m = g.mul(c, v);
        let out = g.sum_all(m);
        let grads = g.backward(out);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(v).unwrap(), &Array2::<f64>::ones((2, 2)));
    }

    #[test]
    fn kron_matches_dense() {
        let a = SparseRows::new(2, vec![vec![(0, 1.0), (1, 2.0)], vec![(1, 3.0)]]);
        let b = SparseRows::new(3, vec![vec![(2, 1.0)], vec![(0, 0.5), (1, 0.5)]]);
        let k = SparseRows::kron(&a, &b).to_dense();
        let (da, db) = (a.to_dense(), b.to_dense());
        for i in 0..4 {
            for j in 0..6 {
                let expect = da[[i / 2, j / 3]] * db[[i % 2, j % 3]];
                assert_eq!(k[[i, j]], expect);
            }
        }
    }
}
