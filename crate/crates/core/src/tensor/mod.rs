//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! All tensors are two-dimensional (`ndarray::Array2<f64>`); sequences are
//! `[T x D]` row-major, convolution activations are `[channels x time]`,
//! scalars are `[1 x 1]`. A [`Tape`] records the forward graph; calling
//! [`Tape::backward`] walks it in reverse and returns per-leaf gradients.
//!
//! Convolutions, transposed convolutions and STFT framing are expressed as
//! [`Tape::gather`]/[`Tape::scatter`] (im2col / col2im) followed by matrix
//! multiplies, so their adjoints fall out of the two index-map primitives.

pub mod check;

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// Broadcast-add a `[1 x n]` row to every row of a `[m x n]` matrix.
    AddRow(Var, Var),
    /// Broadcast-add a `[m x 1]` column to every column of a `[m x n]` matrix.
    AddCol(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast-multiply by a `[1 x n]` row.
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Abs(Var),
    Sqrt(Var),
    /// `ln(max(x, floor))`; gradient is `1/x` above the floor, 0 below.
    LogClamped(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    /// `out[i][j] = flat(x)[map[i][j]]`, or 0 where the map entry is negative.
    Gather(Var, Array2<i64>),
    /// Adjoint of `Gather`: scatter-add into a zeroed output buffer.
    Scatter(Var, Array2<i64>),
    /// Row lookup: `out[i] = table[ids[i]]`.
    Embed(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    MeanAll(Var),
    SumAll(Var),
    /// Column-wise mean over rows, yielding `[1 x n]`.
    MeanRows(Var),
    /// L2-normalize each row: `y = x / sqrt(sum(x^2) + eps)`.
    NormalizeRows(Var, f64),
    /// Mean cross-entropy of row-wise logits against class targets.
    /// Rows with a `None` target are masked out of the mean.
    CrossEntropyRows(Var, Vec<Option<usize>>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by [`Var`], as returned by [`Tape::backward`].
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Forward-graph recorder.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: participates in gradient computation.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: gradients do not flow into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `[1 x 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- arithmetic ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let needs = self.ng(a);
        self.push(value, Op::Transpose(a), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + self.value(row);
        let needs = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), needs)
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.value(col).ncols(), 1);
        let value = self.value(a) + self.value(col);
        let needs = self.ng(a) || self.ng(col);
        self.push(value, Op::AddCol(a, col), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) * self.value(row);
        let needs = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let needs = self.ng(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let needs = self.ng(a);
        self.push(value, Op::AddScalar(a), needs)
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let needs = self.ng(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let value = self.value(a).mapv(|x| if x >= 0.0 { x } else { alpha * x });
        let needs = self.ng(a);
        self.push(value, Op::LeakyRelu(a, alpha), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let needs = self.ng(a);
        self.push(value, Op::Tanh(a), needs)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let needs = self.ng(a);
        self.push(value, Op::Abs(a), needs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        let needs = self.ng(a);
        self.push(value, Op::Sqrt(a), needs)
    }

    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        debug_assert!(floor > 0.0);
        let value = self.value(a).mapv(|x| x.max(floor).ln());
        let needs = self.ng(a);
        self.push(value, Op::LogClamped(a, floor), needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let needs = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), needs)
    }

    /// Row-wise layer normalization with learned `[1 x n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let n = xv.ncols() as f64;
        let mut value = Array2::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter().enumerate() {
                value[[i, j]] = (v - mean) * inv_std * g[[0, j]] + b[[0, j]];
            }
        }
        let needs = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(value, Op::LayerNorm { x, gain, bias, eps }, needs)
    }

    // ---- indexing ----

    /// `out[i][j] = flat(x)[map[i][j]]` with negative map entries reading 0.
    /// `flat` is row-major. The adjoint scatter-adds, so overlapping reads
    /// accumulate correctly.
    pub fn gather(&mut self, x: Var, map: Array2<i64>) -> Var {
        let xv = self.value(x);
        let std_layout = xv.as_standard_layout();
        let flat = std_layout.as_slice().expect("standard layout is contiguous");
        let mut value = Array2::zeros(map.dim());
        for (out, &idx) in value.iter_mut().zip(map.iter()) {
            if idx >= 0 {
                *out = flat[idx as usize];
            }
        }
        let needs = self.ng(x);
        self.push(value, Op::Gather(x, map), needs)
    }

    /// Adjoint of [`Tape::gather`]: `flat(out)[map[i][j]] += x[i][j]`.
    pub fn scatter(&mut self, x: Var, map: Array2<i64>, out_shape: (usize, usize)) -> Var {
        debug_assert_eq!(self.value(x).dim(), map.dim());
        let xv = self.value(x);
        let mut value = Array2::zeros(out_shape);
        {
            let flat = value.as_slice_mut().unwrap();
            for (&v, &idx) in xv.iter().zip(map.iter()) {
                if idx >= 0 {
                    flat[idx as usize] += v;
                }
            }
        }
        let needs = self.ng(x);
        self.push(value, Op::Scatter(x, map), needs)
    }

    /// Row lookup into an embedding table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&t.row(id));
        }
        let needs = self.ng(table);
        self.push(value, Op::Embed(table, ids.to_vec()), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        debug_assert!(!parts.is_empty());
        let ncols = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut value = Array2::zeros((total, ncols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            value
                .slice_mut(ndarray::s![at..at + pv.nrows(), ..])
                .assign(pv);
            at += pv.nrows();
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let needs = self.ng(a);
        self.push(value, Op::SliceRows(a, start, len), needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let needs = self.ng(a);
        self.push(value, Op::SliceCols(a, start, len), needs)
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let needs = self.ng(a);
        self.push(value, Op::MeanAll(a), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let needs = self.ng(a);
        self.push(value, Op::SumAll(a), needs)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = v
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        let needs = self.ng(a);
        self.push(value, Op::MeanRows(a), needs)
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let mut value = v.clone();
        for mut row in value.rows_mut() {
            let norm = (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
            row.mapv_inplace(|x| x / norm);
        }
        let needs = self.ng(a);
        self.push(value, Op::NormalizeRows(a, eps), needs)
    }

    /// Mean cross-entropy over rows with `Some` targets; errors in the caller
    /// must guarantee at least one unmasked row.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        debug_assert_eq!(lv.nrows(), targets.len());
        let count = targets.iter().filter(|t| t.is_some()).count();
        debug_assert!(count > 0, "cross_entropy_rows needs an unmasked position");
        let mut total = 0.0;
        for (row, tgt) in lv.rows().into_iter().zip(targets.iter()) {
            if let Some(t) = tgt {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[*t];
            }
        }
        let value = Array2::from_elem((1, 1), total / count as f64);
        let needs = self.ng(logits);
        self.push(value, Op::CrossEntropyRows(logits, targets.to_vec()), needs)
    }

    // ---- backward ----

    /// Backpropagate from a `[1 x 1]` loss node. Returns gradients for every
    /// node that required them (leaves included).
    pub fn backward(&mut self, loss: Var) -> Grads {
        assert_eq!(
            self.value(loss).dim(),
            (1, 1),
            "backward expects a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.step_back(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn step_back(&self, i: usize, g: &Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>) {
        let acc = |grads: &mut Vec<Option<Array2<f64>>>, v: Var, delta: Array2<f64>| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Transpose(a) => acc(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::AddCol(a, col) => {
                acc(grads, *a, g.clone());
                acc(grads, *col, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * self.value(*b));
                acc(grads, *b, g * self.value(*a));
            }
            Op::MulRow(a, row) => {
                acc(grads, *a, g * self.value(*row));
                let dr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                acc(grads, *row, dr);
            }
            Op::Scale(a, c) => acc(grads, *a, g * *c),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *a, g * &mask);
            }
            Op::LeakyRelu(a, alpha) => {
                let mask = self.value(*a).mapv(|x| if x >= 0.0 { 1.0 } else { *alpha });
                acc(grads, *a, g * &mask);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                acc(grads, *a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Abs(a) => {
                let sign = self.value(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(grads, *a, g * &sign);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                acc(grads, *a, g * &y.mapv(|s| 0.5 / s.max(1e-300)));
            }
            Op::LogClamped(a, floor) => {
                let dx = self
                    .value(*a)
                    .mapv(|x| if x > *floor { 1.0 / x } else { 0.0 });
                acc(grads, *a, g * &dx);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut da = g * y;
                for (mut row, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = row.sum();
                    for (r, s) in row.iter_mut().zip(yrow.iter()) {
                        *r -= dot * s;
                    }
                }
                acc(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let n = xv.ncols() as f64;
                let mut dx = Array2::zeros(xv.dim());
                let mut dgain = Array2::zeros((1, xv.ncols()));
                let mut dbias = Array2::zeros((1, xv.ncols()));
                for (r, row) in xv.rows().into_iter().enumerate() {
                    let mean = row.sum() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let u: Vec<f64> = (0..xv.ncols()).map(|j| g[[r, j]] * gv[[0, j]]).collect();
                    let mean_u = u.iter().sum::<f64>() / n;
                    let mean_ux = u
                        .iter()
                        .zip(xhat.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / n;
                    for j in 0..xv.ncols() {
                        dx[[r, j]] = (u[j] - mean_u - xhat[j] * mean_ux) * inv_std;
                        dgain[[0, j]] += g[[r, j]] * xhat[j];
                        dbias[[0, j]] += g[[r, j]];
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::Gather(x, map) => {
                let xv = self.value(*x);
                let mut dx = Array2::zeros(xv.dim());
                {
                    let flat = dx.as_slice_mut().unwrap();
                    for (&gval, &idx) in g.iter().zip(map.iter()) {
                        if idx >= 0 {
                            flat[idx as usize] += gval;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Scatter(x, map) => {
                let std_layout = g.as_standard_layout();
                let flat = std_layout.as_slice().expect("standard layout is contiguous");
                let mut dx = Array2::zeros(self.value(*x).dim());
                for (out, &idx) in dx.iter_mut().zip(map.iter()) {
                    if idx >= 0 {
                        *out = flat[idx as usize];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Embed(table, ids) => {
                let tv = self.value(*table);
                let mut dt = Array2::zeros(tv.dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(id);
                    row += &g.row(i);
                }
                acc(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    let dp = g.slice(ndarray::s![at..at + rows, ..]).to_owned();
                    acc(grads, p, dp);
                    at += rows;
                }
            }
            Op::SliceRows(a, start, len) => {
                let mut da = Array2::zeros(self.value(*a).dim());
                da.slice_mut(ndarray::s![*start..*start + *len, ..])
                    .assign(g);
                acc(grads, *a, da);
            }
            Op::SliceCols(a, start, len) => {
                let mut da = Array2::zeros(self.value(*a).dim());
                da.slice_mut(ndarray::s![.., *start..*start + *len])
                    .assign(g);
                acc(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let c = g[[0, 0]] / av.len() as f64;
                acc(grads, *a, Array2::from_elem(av.dim(), c));
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                acc(grads, *a, Array2::from_elem(av.dim(), g[[0, 0]]));
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let m = av.nrows() as f64;
                let mut da = Array2::zeros(av.dim());
                for mut row in da.rows_mut() {
                    for (j, slot) in row.iter_mut().enumerate() {
                        *slot = g[[0, j]] / m;
                    }
                }
                acc(grads, *a, da);
            }
            Op::NormalizeRows(a, eps) => {
                let xv = self.value(*a);
                let mut dx = Array2::zeros(xv.dim());
                for (r, row) in xv.rows().into_iter().enumerate() {
                    let norm = (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
                    let dot: f64 = (0..xv.ncols()).map(|j| g[[r, j]] * row[j]).sum();
                    for j in 0..xv.ncols() {
                        dx[[r, j]] = g[[r, j]] / norm - row[j] * dot / (norm * norm * norm);
                    }
                }
                acc(grads, *a, dx);
            }
            Op::CrossEntropyRows(logits, targets) => {
                let lv = self.value(*logits);
                let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                let scale = g[[0, 0]] / count;
                let mut dl = Array2::zeros(lv.dim());
                for (r, tgt) in targets.iter().enumerate() {
                    if let Some(t) = tgt {
                        let row = lv.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for j in 0..lv.ncols() {
                            let p = (row[j] - max).exp() / denom;
                            dl[[r, j]] = scale * (p - if j == *t { 1.0 } else { 0.0 });
                        }
                    }
                }
                acc(grads, *logits, dl);
            }
        }
    }
}

/// Index map for im2col over a `[channels x time]` input.
///
/// The output has shape `[(channels * kernel) x out_len]` where
/// `out_len = (time + 2*pad - dilation*(kernel-1) - 1) / stride + 1`; entry
/// `[(c*kernel + k), t]` addresses `x[c][t*stride + k*dilation - pad]`, with
/// out-of-range positions marked `-1` (gathered as zero).
pub fn im2col_map(
    channels: usize,
    time: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Array2<i64> {
    let span = dilation * (kernel - 1) + 1;
    assert!(
        time + 2 * pad >= span,
        "im2col: input too short for kernel"
    );
    let out_len = (time + 2 * pad - span) / stride + 1;
    let mut map = Array2::from_elem((channels * kernel, out_len), -1i64);
    for c in 0..channels {
        for k in 0..kernel {
            for t in 0..out_len {
                let src = t * stride + k * dilation;
                if src >= pad && src - pad < time {
                    map[[c * kernel + k, t]] = (c * time + (src - pad)) as i64;
                }
            }
        }
    }
    map
}

/// Index map for col2im, the adjoint used by transposed convolution.
///
/// Input shape `[(channels * kernel) x time]`; scattering with this map into
/// a `[channels x out_len]` buffer realizes a stride-`stride` transposed
/// convolution column layout where `out_len = (time-1)*stride + kernel - 2*pad`.
pub fn col2im_map(
    channels: usize,
    time: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Array2<i64>, (usize, usize)) {
    let out_len = (time - 1) * stride + kernel - 2 * pad;
    let mut map = Array2::from_elem((channels * kernel, time), -1i64);
    for c in 0..channels {
        for k in 0..kernel {
            for t in 0..time {
                let dst = t * stride + k;
                if dst >= pad && dst - pad < out_len {
                    map[[c * kernel + k, t]] = (c * out_len + (dst - pad)) as i64;
                }
            }
        }
    }
    (map, (channels, out_len))
}
#[cfg(test)]
#[path = "tests.rs"]
mod tests;
