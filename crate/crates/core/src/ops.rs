//! Forward kernels and their differentiable wrappers.
//!
//! Every kernel is a pure function over immutable tensors. The `DiffOp`
//! implementations pair each kernel with its exact vector-Jacobian product so
//! that the graph in [`crate::graph`] and the finite-difference checker in
//! [`crate::gradcheck`] share a single definition of each operation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A differentiable operation: forward map plus the vector-Jacobian product.
pub trait DiffOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// One gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;

    /// Like [`DiffOp::backward`] but may skip inputs whose gradient is not needed.
    fn backward_needed(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needed: &[bool],
    ) -> Vec<Option<Tensor>> {
        self.backward(inputs, output, grad)
            .into_iter()
            .zip(needed)
            .map(|(g, &n)| n.then_some(g))
            .collect()
    }
}

fn arity(op: &'static str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{op} takes {n} inputs, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Matrix products

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = a.dims2("matmul_nt")?;
    let (_, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    matmul(a, &b.transpose2()?)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let api = ad[p * m + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += api * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn column_sums(g: &Tensor) -> Tensor {
    let n = g.cols();
    let mut out = vec![0.0; n];
    for row in g.data().chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![n], out)
}

pub struct MatMul;

impl DiffOp for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("matmul", inputs, 2)?;
        matmul(inputs[0], inputs[1])
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        self.backward_needed(inputs, output, grad, &[true, true])
            .into_iter()
            .map(Option::unwrap)
            .collect()
    }

    fn backward_needed(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needed: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let da = needed[0].then(|| matmul_nt(grad, b).expect("matmul backward"));
        let db = needed[1].then(|| matmul_tn(a, grad).expect("matmul backward"));
        vec![da, db]
    }
}

/// `x · w (+ b)` with the bias broadcast over rows.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let out = matmul(x, w)?;
    match b {
        None => Ok(out),
        Some(b) => {
            let n = out.cols();
            if b.shape() != [n] {
                return Err(Error::shape("linear bias", &[n], b.shape()));
            }
            let mut out = out;
            for row in out.data_mut().chunks_exact_mut(n) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Ok(out)
        }
    }
}

/// Inputs `(x, w)` or `(x, w, b)`.
pub struct Linear;

impl DiffOp for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        match inputs.len() {
            2 => linear(inputs[0], inputs[1], None),
            3 => linear(inputs[0], inputs[1], Some(inputs[2])),
            n => Err(Error::InvalidArgument(format!("linear takes 2 or 3 inputs, got {n}"))),
        }
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let needed = vec![true; inputs.len()];
        self.backward_needed(inputs, output, grad, &needed)
            .into_iter()
            .map(Option::unwrap)
            .collect()
    }

    fn backward_needed(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needed: &[bool],
    ) -> Vec<Option<Tensor>> {
        let mut grads = MatMul.backward_needed(&inputs[..2], output, grad, &needed[..2]);
        if inputs.len() == 3 {
            grads.push(needed[2].then(|| column_sums(grad)));
        }
        grads
    }
}

// ---------------------------------------------------------------------------
// Normalisation and nonlinearities

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2("softmax_rows")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub struct SoftmaxRows;

impl DiffOp for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("softmax_rows", inputs, 1)?;
        softmax_rows(inputs[0])
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let n = output.cols();
        let mut dx = vec![0.0; output.numel()];
        for ((d, y), g) in dx
            .chunks_exact_mut(n)
            .zip(output.data().chunks_exact(n))
            .zip(grad.data().chunks_exact(n))
        {
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for j in 0..n {
                d[j] = y[j] * (g[j] - dot);
            }
        }
        vec![Tensor::from_parts(output.shape().to_vec(), dx)]
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalisation to zero mean and unit population variance, then `gamma · x̂ + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_parts(x, gamma, beta, eps)?.0)
}

/// Returns the output together with `x̂` and the per-row inverse std.
fn layer_norm_parts(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (m, n) = x.dims2("layer_norm")?;
    if gamma.shape() != [n] {
        return Err(Error::shape("layer_norm gamma", &[n], gamma.shape()));
    }
    if beta.shape() != [n] {
        return Err(Error::shape("layer_norm beta", &[n], beta.shape()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = vec![0.0; m * n];
    let mut xhat = vec![0.0; m * n];
    let mut inv_std = vec![0.0; m];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..n {
            let h = (row[j] - mean) * is;
            xhat[i * n + j] = h;
            out[i * n + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok((Tensor::from_parts(vec![m, n], out), xhat, inv_std))
}

/// Inputs `(x, gamma, beta)`.
pub struct LayerNorm {
    pub eps: f64,
}

impl Default for LayerNorm {
    fn default() -> Self {
        LayerNorm { eps: LAYER_NORM_EPS }
    }
}

impl DiffOp for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("layer_norm", inputs, 3)?;
        layer_norm(inputs[0], inputs[1], inputs[2], self.eps)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (_, xhat, inv_std) =
            layer_norm_parts(x, gamma, inputs[2], self.eps).expect("layer_norm backward");
        let (m, n) = (x.rows(), x.cols());
        let g = grad.data();
        let mut dx = vec![0.0; m * n];
        let mut dgamma = vec![0.0; n];
        let mut dbeta = vec![0.0; n];
        let mut dxhat = vec![0.0; n];
        for i in 0..m {
            let gr = &g[i * n..(i + 1) * n];
            let hr = &xhat[i * n..(i + 1) * n];
            let mut mean_d = 0.0;
            let mut mean_dh = 0.0;
            for j in 0..n {
                dgamma[j] += gr[j] * hr[j];
                dbeta[j] += gr[j];
                dxhat[j] = gr[j] * gamma.data()[j];
                mean_d += dxhat[j];
                mean_dh += dxhat[j] * hr[j];
            }
            mean_d /= n as f64;
            mean_dh /= n as f64;
            for j in 0..n {
                dx[i * n + j] = inv_std[i] * (dxhat[j] - mean_d - hr[j] * mean_dh);
            }
        }
        vec![
            Tensor::from_parts(vec![m, n], dx),
            Tensor::from_parts(vec![n], dgamma),
            Tensor::from_parts(vec![n], dbeta),
        ]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Tanh approximation of `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub struct Gelu;

impl DiffOp for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("gelu", inputs, 1)?;
        Ok(gelu(inputs[0]))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let dx = inputs[0]
            .zip_map(grad, "gelu backward", |x, g| g * gelu_grad_scalar(x))
            .expect("gelu backward");
        vec![dx]
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub struct Relu;

impl DiffOp for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("relu", inputs, 1)?;
        Ok(relu(inputs[0]))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let dx = inputs[0]
            .zip_map(grad, "relu backward", |x, g| if x > 0.0 { g } else { 0.0 })
            .expect("relu backward");
        vec![dx]
    }
}

// ---------------------------------------------------------------------------
// Loss

pub const LOG_CLAMP: f64 = 1e-12;

fn check_labels(labels: &[usize], rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {rows} probability rows",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("label {bad} is not in {{0, 1}}")));
    }
    Ok(())
}

/// Mean over rows of `-ln p(true class)`, probabilities clamped at [`LOG_CLAMP`].
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (m, n) = probs.dims2("cross_entropy")?;
    if n != 2 {
        return Err(Error::shape("cross_entropy", &[m, 2], probs.shape()));
    }
    check_labels(labels, m)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.at2(i, l).max(LOG_CLAMP).ln())
        .sum();
    Ok(total / m as f64)
}

pub struct CrossEntropy {
    pub labels: Vec<usize>,
}

impl DiffOp for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("cross_entropy", inputs, 1)?;
        cross_entropy(inputs[0], &self.labels).map(Tensor::scalar)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let probs = inputs[0];
        let m = probs.rows();
        let g = grad.data()[0];
        let mut d = vec![0.0; probs.numel()];
        for (i, &l) in self.labels.iter().enumerate() {
            let p = probs.at2(i, l);
            if p > LOG_CLAMP {
                d[i * 2 + l] = -g / (m as f64 * p);
            }
        }
        vec![Tensor::from_parts(probs.shape().to_vec(), d)]
    }
}

// ---------------------------------------------------------------------------
// Structural operations

/// Elementwise sum of two equally shaped tensors.
pub struct Add;

impl DiffOp for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("add", inputs, 2)?;
        inputs[0].add(inputs[1])
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![grad.clone(), grad.clone()]
    }
}

pub struct Scale(pub f64);

impl DiffOp for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("scale", inputs, 1)?;
        Ok(inputs[0].scale(self.0))
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![grad.scale(self.0)]
    }
}

pub struct Reshape(pub Vec<usize>);

impl DiffOp for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("reshape", inputs, 1)?;
        inputs[0].reshape(&self.0)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![grad.reshape(inputs[0].shape()).expect("reshape backward")]
    }
}

pub struct Transpose;

impl DiffOp for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("transpose", inputs, 1)?;
        inputs[0].transpose2()
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![grad.transpose2().expect("transpose backward")]
    }
}

/// `out.flat[i] = in.flat[index[i]]`, reshaped to `shape`. Indices may repeat.
pub struct Gather {
    pub index: Vec<usize>,
    pub shape: Vec<usize>,
}

impl DiffOp for Gather {
    fn name(&self) -> &'static str {
        "gather"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("gather", inputs, 1)?;
        let src = inputs[0].data();
        if let Some(&bad) = self.index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {} values",
                src.len()
            )));
        }
        Tensor::new(self.shape.clone(), self.index.iter().map(|&i| src[i]).collect())
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let mut d = vec![0.0; inputs[0].numel()];
        for (&i, &g) in self.index.iter().zip(grad.data()) {
            d[i] += g;
        }
        vec![Tensor::from_parts(inputs[0].shape().to_vec(), d)]
    }
}

/// Columns `[start, end)` of a matrix.
pub struct SliceCols {
    pub start: usize,
    pub end: usize,
}

impl DiffOp for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("slice_cols", inputs, 1)?;
        let (m, n) = inputs[0].dims2("slice_cols")?;
        if self.start >= self.end || self.end > n {
            return Err(Error::InvalidArgument(format!(
                "column range {}..{} invalid for width {n}",
                self.start, self.end
            )));
        }
        let w = self.end - self.start;
        let mut out = Vec::with_capacity(m * w);
        for row in inputs[0].data().chunks_exact(n) {
            out.extend_from_slice(&row[self.start..self.end]);
        }
        Ok(Tensor::from_parts(vec![m, w], out))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (m, n) = (inputs[0].rows(), inputs[0].cols());
        let w = self.end - self.start;
        let mut d = vec![0.0; m * n];
        for (i, g) in grad.data().chunks_exact(w).enumerate() {
            d[i * n + self.start..i * n + self.end].copy_from_slice(g);
        }
        vec![Tensor::from_parts(vec![m, n], d)]
    }
}

/// Side-by-side concatenation of matrices with equal row counts.
pub struct ConcatCols;

impl DiffOp for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let (m, _) = first.dims2("concat_cols")?;
        let mut width = 0;
        for t in inputs {
            let (r, c) = t.dims2("concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", first.shape(), t.shape()));
            }
            width += c;
        }
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            for t in inputs {
                out.extend_from_slice(t.row(i));
            }
        }
        Ok(Tensor::from_parts(vec![m, width], out))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let width = grad.cols();
        let mut offset = 0;
        inputs
            .iter()
            .map(|t| {
                let (m, c) = (t.rows(), t.cols());
                let mut d = Vec::with_capacity(m * c);
                for i in 0..m {
                    d.extend_from_slice(&grad.data()[i * width + offset..i * width + offset + c]);
                }
                offset += c;
                Tensor::from_parts(vec![m, c], d)
            })
            .collect()
    }
}

/// Vertical concatenation of matrices with equal column counts.
pub struct ConcatRows;

impl DiffOp for ConcatRows {
    fn name(&self) -> &'static str {
        "concat_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let (_, n) = first.dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for t in inputs {
            let (r, c) = t.dims2("concat_rows")?;
            if c != n {
                return Err(Error::shape("concat_rows", first.shape(), t.shape()));
            }
            rows += r;
            out.extend_from_slice(t.data());
        }
        Ok(Tensor::from_parts(vec![rows, n], out))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let mut offset = 0;
        inputs
            .iter()
            .map(|t| {
                let len = t.numel();
                let d = grad.data()[offset..offset + len].to_vec();
                offset += len;
                Tensor::from_parts(t.shape().to_vec(), d)
            })
            .collect()
    }
}

/// Row `index` of a matrix as a `1 × n` matrix.
pub struct SelectRow(pub usize);

impl DiffOp for SelectRow {
    fn name(&self) -> &'static str {
        "select_row"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("select_row", inputs, 1)?;
        let (m, n) = inputs[0].dims2("select_row")?;
        if self.0 >= m {
            return Err(Error::InvalidArgument(format!("row {} of {m}", self.0)));
        }
        Ok(Tensor::from_parts(vec![1, n], inputs[0].row(self.0).to_vec()))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let n = inputs[0].cols();
        let mut d = vec![0.0; inputs[0].numel()];
        d[self.0 * n..(self.0 + 1) * n].copy_from_slice(grad.data());
        vec![Tensor::from_parts(inputs[0].shape().to_vec(), d)]
    }
}

/// Column means of a matrix as a `1 × n` matrix.
pub struct MeanRows;

impl DiffOp for MeanRows {
    fn name(&self) -> &'static str {
        "mean_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("mean_rows", inputs, 1)?;
        let (m, n) = inputs[0].dims2("mean_rows")?;
        let sums = column_sums(inputs[0]);
        Ok(Tensor::from_parts(vec![1, n], sums.data().iter().map(|s| s / m as f64).collect()))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let m = inputs[0].rows();
        let row: Vec<f64> = grad.data().iter().map(|g| g / m as f64).collect();
        let d = row.repeat(m);
        vec![Tensor::from_parts(inputs[0].shape().to_vec(), d)]
    }
}

pub struct SumAll;

impl DiffOp for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("sum", inputs, 1)?;
        Ok(Tensor::scalar(inputs[0].sum()))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![Tensor::full(inputs[0].shape(), grad.data()[0])]
    }
}

pub struct SumSquares;

impl DiffOp for SumSquares {
    fn name(&self) -> &'static str {
        "sum_squares"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("sum_squares", inputs, 1)?;
        Ok(Tensor::scalar(inputs[0].data().iter().map(|v| v * v).sum()))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let g = grad.data()[0];
        vec![inputs[0].map(|v| 2.0 * g * v)]
    }
}

// ---------------------------------------------------------------------------
// Convolution ladder primitives, NHWC layout

fn nhwc(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape()[..] {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::InvalidShape(format!(
            "{op} expects [N, H, W, C], got {:?}",
            t.shape()
        ))),
    }
}

/// Patch matrix `[N·H·W, k·k·C]` for a stride-1 "same" convolution; columns are `(ky, kx, c)`.
fn im2col(x: &Tensor, k: usize) -> Tensor {
    let (n, h, w, c) = nhwc(x, "im2col").expect("checked by caller");
    let pad = (k / 2) as isize;
    let width = k * k * c;
    let mut cols = vec![0.0; n * h * w * width];
    let xd = x.data();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * width;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n * h * w, width], cols)
}

fn col2im(cols: &Tensor, shape: (usize, usize, usize, usize), k: usize) -> Tensor {
    let (n, h, w, c) = shape;
    let pad = (k / 2) as isize;
    let width = k * k * c;
    let cd = cols.data();
    let mut x = vec![0.0; n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * width;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for ch in 0..c {
                            x[dst + ch] += cd[src + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, h, w, c], x)
}

/// Stride-1 zero-padded convolution. `x: [N,H,W,C]`, `w: [k·k·C, C_out]`, `b: [C_out]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, k: usize) -> Result<Tensor> {
    let (n, h, wd, c) = nhwc(x, "conv2d")?;
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("conv2d kernel size must be odd, got {k}")));
    }
    let (rows, cout) = w.dims2("conv2d")?;
    if rows != k * k * c {
        return Err(Error::shape("conv2d weight", &[k * k * c, cout], w.shape()));
    }
    let out = linear(&im2col(x, k), w, Some(b))?;
    out.into_reshaped(&[n, h, wd, cout])
}

/// Inputs `(x, w, b)`.
pub struct Conv2d {
    pub kernel: usize,
}

impl DiffOp for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("conv2d", inputs, 3)?;
        conv2d(inputs[0], inputs[1], inputs[2], self.kernel)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        self.backward_needed(inputs, output, grad, &[true, true, true])
            .into_iter()
            .map(Option::unwrap)
            .collect()
    }

    fn backward_needed(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needed: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let dims = nhwc(x, "conv2d").expect("forward validated");
        let cout = w.cols();
        let g = grad.reshape(&[grad.numel() / cout, cout]).expect("conv2d grad");
        let dw = needed[1].then(|| matmul_tn(&im2col(x, self.kernel), &g).expect("conv2d dw"));
        let db = needed[2].then(|| column_sums(&g));
        let dx = needed[0].then(|| {
            let dcols = matmul_nt(&g, w).expect("conv2d dx");
            col2im(&dcols, dims, self.kernel)
        });
        vec![dx, dw, db]
    }
}

/// 2×2 stride-2 max pooling; odd trailing rows/columns are dropped.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    Ok(max_pool2_parts(x)?.0)
}

fn max_pool2_parts(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, h, w, c) = nhwc(x, "max_pool2")?;
    if h < 2 || w < 2 {
        return Err(Error::InvalidShape(format!(
            "max_pool2 needs H, W >= 2, got {:?}",
            x.shape()
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; n * oh * ow * c];
    let mut argmax = vec![0; out.len()];
    for b in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                    let o = ((b * oh + y) * ow + xx) * c + ch;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, oh, ow, c], out), argmax))
}

pub struct MaxPool2;

impl DiffOp for MaxPool2 {
    fn name(&self) -> &'static str {
        "max_pool2"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        arity("max_pool2", inputs, 1)?;
        max_pool2(inputs[0])
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (_, argmax) = max_pool2_parts(inputs[0]).expect("max_pool2 backward");
        let mut d = vec![0.0; inputs[0].numel()];
        for (&i, &g) in argmax.iter().zip(grad.data()) {
            d[i] += g;
        }
        vec![Tensor::from_parts(inputs[0].shape().to_vec(), d)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);
        let r = matmul(&m(&[&[1.0, 2.0]]), &m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let a = m(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, 1.0]]);
        let b = m(&[&[2.0, 1.0, -1.0], &[0.5, 0.0, 4.0]]);
        let nt = matmul_nt(&a, &b).unwrap();
        assert_eq!(nt, matmul(&a, &b.transpose2().unwrap()).unwrap());
        let tn = matmul_tn(&a, &b).unwrap();
        assert_eq!(tn, matmul(&a.transpose2().unwrap(), &b).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&m(&[&[0.0, 0.0, 0.0]])).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for x in [-5.0, 0.0, 17.0] {
            let s = softmax_rows(&m(&[&[x, x + 2f64.ln()]])).unwrap();
            assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-12);
            assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        }
        let s = softmax_rows(&m(&[&[1000.0, 1000.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let c = layer_norm(&m(&[&[4.0, 4.0]]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let r = layer_norm(&m(&[&[1.0, 3.0]]), &ones, &zeros, 1e-12).unwrap();
        assert!((r.data()[0] + 1.0).abs() < 1e-9 && (r.data()[1] - 1.0).abs() < 1e-9);
        let b = Tensor::vector(vec![0.25, -2.0]).unwrap();
        let r = layer_norm(&m(&[&[1.0, 7.0], &[-3.0, 2.0]]), &zeros, &b, 1e-5).unwrap();
        assert_eq!(r.data(), &[0.25, -2.0, 0.25, -2.0]);
        assert!(layer_norm(&m(&[&[1.0, 3.0]]), &ones, &zeros, 0.0).is_err());
    }

    #[test]
    fn linear_examples() {
        let x = m(&[&[1.0, -2.0], &[0.5, 3.0]]);
        assert_eq!(linear(&x, &Tensor::eye(2), None).unwrap(), x);
        let y = linear(
            &m(&[&[1.0, 1.0]]),
            &m(&[&[1.0], &[2.0]]),
            Some(&Tensor::vector(vec![0.5]).unwrap()),
        )
        .unwrap();
        assert_eq!(y.data(), &[3.5]);
        let y = linear(&x, &Tensor::zeros(&[2, 1]), Some(&Tensor::vector(vec![-1.5]).unwrap())).unwrap();
        assert_eq!(y.data(), &[-1.5, -1.5]);
        assert!(linear(&x, &Tensor::zeros(&[3, 1]), None).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(&Tensor::scalar(0.0)).data(), &[0.0]);
        for x in [6.0, 8.0, 20.0] {
            assert!((gelu(&Tensor::scalar(x)).data()[0] - x).abs() < 1e-6);
        }
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        assert!((gelu(&Tensor::scalar(1.0)).data()[0] - 0.841_192).abs() < 1e-5);
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let ys = gelu(&Tensor::vector(xs).unwrap());
        assert!(ys.data().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn cross_entropy_examples() {
        let certain = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(cross_entropy(&certain, &[0, 1]).unwrap(), 0.0);
        let uniform = m(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!((cross_entropy(&uniform, &[0, 1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let r = cross_entropy(&m(&[&[0.9, 0.1]]), &[0]).unwrap();
        assert!((r - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!(cross_entropy(&uniform, &[0, 2]).is_err());
        // clamped instead of -inf
        let r = cross_entropy(&m(&[&[1.0, 0.0]]), &[1]).unwrap();
        assert!((r - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        // 3x3 kernel with a single 1 at the centre is the identity map.
        let x = Tensor::new(vec![1, 3, 4, 1], (0..12).map(f64::from).collect()).unwrap();
        let mut w = Tensor::zeros(&[9, 1]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 3).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_box_filter_sums_neighbourhood() {
        let x = Tensor::full(&[1, 3, 3, 1], 1.0);
        let y = conv2d(&x, &Tensor::full(&[9, 1], 1.0), &Tensor::zeros(&[1]), 3).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn max_pool_takes_window_max() {
        let x = Tensor::new(vec![1, 2, 4, 1], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 8.0]).unwrap();
        let y = max_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 1]);
        assert_eq!(y.data(), &[5.0, 8.0]);
    }
}
