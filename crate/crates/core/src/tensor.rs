//! Dense row-major `f64` tensors and the value-level kernels shared with the tape.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Elementwise nonlinearities used by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
    Softplus,
    Exp,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z * sigmoid(z),
            Activation::Relu => z.max(0.0),
            Activation::Softplus => softplus(z),
            Activation::Exp => z.exp(),
        }
    }

    /// Derivative with respect to the input, given input `z` and output `y`.
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(z),
            Activation::Exp => y,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow; returns `z` itself above 30.
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.max(0.0) + (-z.abs()).exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("shape product matches")
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("shape product matches")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Build a rank-2 tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                got: self.shape.clone(),
            }),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1..].iter().product::<usize>();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        Ok(Self::new(vec![c, r], transpose(&self.data, r, c)).expect("same size"))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self::new(vec![m, n], out).expect("m*n"))
    }

    pub fn activation(&self, kind: Activation) -> Self {
        Self::new(
            self.shape.clone(),
            self.data.iter().map(|&z| kind.apply(z)).collect(),
        )
        .expect("same shape")
    }

    pub fn softmax_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2("softmax_rows")?;
        let mut out = self.data.clone();
        softmax_rows_inplace(&mut out, r, c);
        Ok(Self::new(vec![r, c], out).expect("same shape"))
    }

    pub fn depthwise_conv1d(&self, kernel: &Tensor, bias: &Tensor) -> Result<Self> {
        let (l, e, w) = check_conv(self, kernel, bias)?;
        Ok(Self::new(
            vec![l, e],
            conv1d_causal(&self.data, &kernel.data, &bias.data, l, e, w),
        )
        .expect("same shape"))
    }

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Self> {
        let (r, c) = check_layer_norm(self, gamma, beta)?;
        let (out, _, _) = layer_norm_forward(&self.data, &gamma.data, &beta.data, r, c);
        Ok(Self::new(vec![r, c], out).expect("same shape"))
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// `out += a (m×k) · b (k×n)`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Four independent partial sums so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += a (m×k) · bᵀ` where `b` is stored n×k.
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out += aᵀ · b` where `a` is stored k×m and `b` is k×n.
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_rows_inplace(data: &mut [f64], r: usize, c: usize) {
    for row in data.chunks_mut(c).take(r) {
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
}

pub(crate) fn check_conv(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (l, e) = x.dims2("depthwise_conv1d")?;
    let (ke, w) = kernel.dims2("depthwise_conv1d")?;
    if ke != e || bias.len() != e {
        return Err(TensorError::ShapeMismatch {
            op: "depthwise_conv1d",
            lhs: x.shape.clone(),
            rhs: kernel.shape.clone(),
        });
    }
    Ok((l, e, w))
}

/// Causal depthwise convolution with implicit zero left-padding.
pub(crate) fn conv1d_causal(x: &[f64], k: &[f64], b: &[f64], l: usize, e: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; l * e];
    for t in 0..l {
        for ch in 0..e {
            let mut acc = b[ch];
            for tap in 0..w {
                // source index t - (w - 1) + tap
                let src = t + tap;
                if src + 1 >= w {
                    acc += k[ch * w + tap] * x[(src + 1 - w) * e + ch];
                }
            }
            out[t * e + ch] = acc;
        }
    }
    out
}

pub(crate) fn check_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize)> {
    let (r, c) = x.dims2("layer_norm")?;
    if gamma.len() != c || beta.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    Ok((r, c))
}

/// Returns `(output, normalized input, reciprocal std per row)`.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    r: usize,
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; r * c];
    let mut xhat = vec![0.0; r * c];
    let mut rstd = vec![0.0; r];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[i] = rs;
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[i * c + j] = h;
            out[i * c + j] = h * gamma[j] + beta[j];
        }
    }
    (out, xhat, rstd)
}
