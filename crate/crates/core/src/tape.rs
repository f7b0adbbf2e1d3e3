//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward operation appends one node holding its output value and the
//! handles of its inputs. Since inputs always exist before the node that
//! consumes them, node order is a topological order and the backward pass is a
//! single reverse sweep. Leaves wrap shared (`Arc`) tensors so parameter
//! snapshots can be bound into many tapes without copying.

use std::sync::Arc;

use crate::ssm;
use crate::tensor::{self, Activation, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Act(Var, Activation),
    SoftmaxRows(Var),
    Conv {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        beta: Var,
    },
    Transpose(Var),
    ReverseRows(Var),
    Reshape(Var),
    Sum(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    ZohA {
        a: Var,
        delta: Var,
    },
    ZohB {
        a: Var,
        delta: Var,
        b: Var,
        phi: Vec<f64>,
        dphi: Vec<f64>,
    },
    Scan {
        a_bar: Var,
        b_bar: Var,
        c: Var,
        x: Var,
        states: Vec<f64>,
    },
    PairwiseSqDist(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Act(_, Activation::Silu) => "silu",
            Op::Act(_, Activation::Relu) => "relu",
            Op::Act(_, Activation::Softplus) => "softplus",
            Op::Act(_, Activation::Exp) => "exp",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Conv { .. } => "depthwise_conv1d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Transpose(_) => "transpose",
            Op::ReverseRows(_) => "reverse_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::ZohA { .. } => "zoh_a",
            Op::ZohB { .. } => "zoh_b",
            Op::Scan { .. } => "selective_scan",
            Op::PairwiseSqDist(_) => "pairwise_sq_dist",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
    name: Option<String>,
}

/// Computation record for one forward execution.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the variable did not influence the loss or was not tracked.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when absent.
    pub fn wrt_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.wrt(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
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

    /// Multiply-accumulate operations recorded so far by matmul, convolution
    /// and scan nodes (elementwise work is not counted).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf from an owned tensor; tracks gradients when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.leaf_shared(Arc::new(tensor), rg, None)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf_shared(Arc::new(tensor), false, None)
    }

    pub fn leaf_shared(&mut self, tensor: Arc<Tensor>, requires_grad: bool, name: Option<&str>) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad: requires_grad,
            name: name.map(str::to_owned),
        });
        Var(self.nodes.len() - 1)
    }

    /// Describes the first node whose value holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| match &n.name {
                Some(name) => format!("{name} (node {i})"),
                None => format!("{} output (node {i})", n.op.name()),
            })
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let (m, k) = self.dims2("matmul", a)?;
        self.macs += (m * k * out.shape()[1]) as u64;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`P` vector to every row of an `M×P` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, p) = self.dims2("add_bias", a)?;
        if self.value(bias).len() != p {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let data = self
            .data(a)
            .chunks(p)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * factor).collect())?;
        Ok(self.push(out, Op::Scale(a, factor), &[a]))
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(TensorError::Invalid {
                op: "scale_by",
                msg: format!("scale must hold one element, got shape {:?}", self.shape(s)),
            });
        }
        let factor = self.data(s)[0];
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * factor).collect())?;
        Ok(self.push(out, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let out = self.value(a).activation(kind);
        Ok(self.push(out, Op::Act(a, kind), &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (l, e, w) = tensor::check_conv(self.value(x), self.value(kernel), self.value(bias))?;
        let out = self.value(x).depthwise_conv1d(self.value(kernel), self.value(bias))?;
        self.macs += (l * e * w) as u64;
        Ok(self.push(out, Op::Conv { x, kernel, bias }, &[x, kernel, bias]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = tensor::check_layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let (out, xhat, rstd) =
            tensor::layer_norm_forward(self.data(x), self.data(gamma), self.data(beta), r, c);
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Reverses the order of the leading axis (time reversal for `L×N` inputs).
    pub fn reverse_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let rows = v.shape()[0];
        let width = v.len() / rows;
        let data = (0..rows).rev().flat_map(|r| v.data()[r * width..(r + 1) * width].iter().copied()).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ReverseRows(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.data(a).iter().sum());
        Ok(self.push(out, Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `M×P → [M]`, summing each row.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, p) = self.dims2("row_sum", a)?;
        let data = self.data(a).chunks(p).map(|r| r.iter().sum()).collect();
        let out = Tensor::new(vec![m], data)?;
        Ok(self.push(out, Op::RowSum(a), &[a]))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "nothing to concatenate".into(),
        })?;
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pw) = self.dims2("concat_cols", p)?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pw);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// `Â = exp(δ·A)`: `A` is `E×H`, `δ` is `L×E`, output `L×E×H`.
    pub fn zoh_a(&mut self, a: Var, delta: Var) -> Result<Var> {
        let (e, h) = self.dims2("zoh_a", a)?;
        let (l, e2) = self.dims2("zoh_a", delta)?;
        if e != e2 {
            return Err(TensorError::ShapeMismatch {
                op: "zoh_a",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(delta).to_vec(),
            });
        }
        let out = ssm::zoh_a_kernel(self.data(a), self.data(delta), l, e, h);
        let out = Tensor::new(vec![l, e, h], out)?;
        Ok(self.push(out, Op::ZohA { a, delta }, &[a, delta]))
    }

    /// `B̂ = (δA)⁻¹(exp(δA) − 1)·δ·B`: `B` is `L×H`, output `L×E×H`.
    pub fn zoh_b(&mut self, a: Var, delta: Var, b: Var) -> Result<Var> {
        let (l, e, h) = ssm::check_inputs(self.value(a), self.value(delta), self.value(b))?;
        let (out, phi, dphi) = ssm::zoh_b_kernel(self.data(a), self.data(delta), self.data(b), l, e, h);
        let out = Tensor::new(vec![l, e, h], out)?;
        Ok(self.push(out, Op::ZohB { a, delta, b, phi, dphi }, &[a, delta, b]))
    }

    /// Selective scan over discretized `Â`, `B̂` (`L×E×H`), `C` (`L×H`), `x` (`L×E`).
    pub fn selective_scan(&mut self, a_bar: Var, b_bar: Var, c: Var, x: Var) -> Result<Var> {
        let (l, e, h) = ssm::check_scan(self.value(a_bar), self.value(b_bar), self.value(c), self.value(x))?;
        let (y, states) = ssm::scan_kernel(
            self.data(a_bar),
            self.data(b_bar),
            self.data(c),
            self.data(x),
            l,
            e,
            h,
        );
        self.macs += (3 * l * e * h) as u64;
        let out = Tensor::new(vec![l, e], y)?;
        Ok(self.push(
            out,
            Op::Scan {
                a_bar,
                b_bar,
                c,
                x,
                states,
            },
            &[a_bar, b_bar, c, x],
        ))
    }

    /// Squared Euclidean distances between the rows of an `N×d` matrix.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims2("pairwise_sq_dist", a)?;
        let p = self.data(a);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    out[i * n + j] = (0..d).map(|k| (p[i * d + k] - p[j * d + k]).powi(2)).sum();
                }
            }
        }
        self.macs += (n * n * d) as u64;
        let out = Tensor::new(vec![n, n], out)?;
        Ok(self.push(out, Op::PairwiseSqDist(a), &[a]))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_from(&[(loss, &[1.0])])
    }

    /// Reverse sweep seeded with explicit output adjoints. Seeds for the same
    /// variable accumulate.
    pub fn backward_from(&self, seeds: &[(Var, &[f64])]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for &(v, g) in seeds {
            if g.len() != self.value(v).len() {
                return Err(TensorError::ShapeMismatch {
                    op: "backward",
                    lhs: self.shape(v).to_vec(),
                    rhs: vec![g.len()],
                });
            }
            accumulate(&mut grads, v, self.value(v).len(), &mut |buf| axpy(buf, g, 1.0));
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        // Accumulates into `v`'s gradient only when `v` is tracked.
        let mut add = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.needs(v) {
                accumulate(grads, v, self.value(v).len(), f);
            }
        };
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2("matmul").expect("checked");
                let n = self.shape(b)[1];
                add(a, &mut |ga| tensor::matmul_bt_acc(g, self.data(b), ga, m, n, k));
                add(b, &mut |gb| tensor::matmul_at_acc(self.data(a), g, gb, k, m, n));
            }
            Op::Add(a, b) => {
                add(a, &mut |ga| axpy(ga, g, 1.0));
                add(b, &mut |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                add(a, &mut |ga| axpy(ga, g, 1.0));
                add(b, &mut |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                add(a, &mut |ga| {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(self.data(b)) {
                        *d += gi * bi;
                    }
                });
                add(b, &mut |gb| {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(self.data(a)) {
                        *d += gi * ai;
                    }
                });
            }
            Op::AddBias(a, bias) => {
                add(a, &mut |ga| axpy(ga, g, 1.0));
                add(bias, &mut |gb| {
                    let p = gb.len();
                    for row in g.chunks(p) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::Scale(a, factor) => add(a, &mut |ga| axpy(ga, g, factor)),
            Op::ScaleBy(a, s) => {
                let factor = self.data(s)[0];
                add(a, &mut |ga| axpy(ga, g, factor));
                add(s, &mut |gs| {
                    gs[0] += g.iter().zip(self.data(a)).map(|(x, y)| x * y).sum::<f64>();
                });
            }
            Op::Act(a, kind) => add(a, &mut |ga| {
                for ((d, gi), (&z, &y)) in ga.iter_mut().zip(g).zip(self.data(a).iter().zip(out)) {
                    *d += gi * kind.derivative(z, y);
                }
            }),
            Op::SoftmaxRows(a) => {
                let c = node.value.shape()[1];
                add(a, &mut |ga| {
                    for ((dr, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Conv { x, kernel, bias } => {
                let (l, e) = self.value(x).dims2("conv").expect("checked");
                let w = self.shape(kernel)[1];
                let xs = self.data(x);
                let ks = self.data(kernel);
                add(x, &mut |gx| {
                    for t in 0..l {
                        for ch in 0..e {
                            for tap in 0..w {
                                if t + tap + 1 >= w {
                                    gx[(t + tap + 1 - w) * e + ch] += g[t * e + ch] * ks[ch * w + tap];
                                }
                            }
                        }
                    }
                });
                add(kernel, &mut |gk| {
                    for t in 0..l {
                        for ch in 0..e {
                            for tap in 0..w {
                                if t + tap + 1 >= w {
                                    gk[ch * w + tap] += g[t * e + ch] * xs[(t + tap + 1 - w) * e + ch];
                                }
                            }
                        }
                    }
                });
                add(bias, &mut |gb| {
                    for row in g.chunks(e) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref rstd,
            } => {
                let c = self.shape(gamma).iter().product::<usize>();
                let gm = self.data(gamma);
                add(x, &mut |gx| {
                    for (i, ((dr, gr), hr)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let dxhat: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dr[j] += rstd[i] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
                add(gamma, &mut |gg| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                add(beta, &mut |gb| {
                    for gr in g.chunks(c) {
                        axpy(gb, gr, 1.0);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(a).dims2("transpose").expect("checked");
                add(a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ReverseRows(a) => {
                let rows = self.shape(a)[0];
                let width = g.len() / rows;
                add(a, &mut |ga| {
                    for r in 0..rows {
                        let src = &g[(rows - 1 - r) * width..(rows - r) * width];
                        axpy(&mut ga[r * width..(r + 1) * width], src, 1.0);
                    }
                });
            }
            Op::Reshape(a) => add(a, &mut |ga| axpy(ga, g, 1.0)),
            Op::Sum(a) => add(a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::RowSum(a) => {
                let p = self.shape(a)[1];
                add(a, &mut |ga| {
                    for (dr, gi) in ga.chunks_mut(p).zip(g) {
                        dr.iter_mut().for_each(|d| *d += gi);
                    }
                });
            }
            Op::ConcatCols(ref parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    add(p, &mut |gp| {
                        for (r, dr) in gp.chunks_mut(w).enumerate() {
                            axpy(dr, &g[r * total + offset..r * total + offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::ZohA { a, delta } => {
                let (e, h) = self.value(a).dims2("zoh_a").expect("checked");
                let l = self.shape(delta)[0];
                let (av, dv) = (self.data(a), self.data(delta));
                add(a, &mut |ga| {
                    for t in 0..l {
                        for ch in 0..e {
                            let base = (t * e + ch) * h;
                            for s in 0..h {
                                ga[ch * h + s] += g[base + s] * out[base + s] * dv[t * e + ch];
                            }
                        }
                    }
                });
                add(delta, &mut |gd| {
                    for t in 0..l {
                        for ch in 0..e {
                            let base = (t * e + ch) * h;
                            gd[t * e + ch] +=
                                (0..h).map(|s| g[base + s] * out[base + s] * av[ch * h + s]).sum::<f64>();
                        }
                    }
                });
            }
            Op::ZohB {
                a,
                delta,
                b,
                ref phi,
                ref dphi,
            } => {
                let (e, h) = self.value(a).dims2("zoh_b").expect("checked");
                let l = self.shape(delta)[0];
                let (av, dv, bv) = (self.data(a), self.data(delta), self.data(b));
                // B̂ = q(δ, a)·B with q = φ(δa)·δ, ∂q/∂δ = φ + zφ', ∂q/∂a = φ'·δ².
                let mut ga_acc = vec![0.0; e * h];
                let mut gd_acc = vec![0.0; l * e];
                let mut gb_acc = vec![0.0; l * h];
                for t in 0..l {
                    for ch in 0..e {
                        let d = dv[t * e + ch];
                        let base = (t * e + ch) * h;
                        for s in 0..h {
                            let z = d * av[ch * h + s];
                            let (p, dp) = (phi[base + s], dphi[base + s]);
                            let gi = g[base + s];
                            let bi = bv[t * h + s];
                            gb_acc[t * h + s] += gi * p * d;
                            ga_acc[ch * h + s] += gi * bi * dp * d * d;
                            gd_acc[t * e + ch] += gi * bi * (p + z * dp);
                        }
                    }
                }
                add(a, &mut |ga| axpy(ga, &ga_acc, 1.0));
                add(delta, &mut |gd| axpy(gd, &gd_acc, 1.0));
                add(b, &mut |gb| axpy(gb, &gb_acc, 1.0));
            }
            Op::Scan {
                a_bar,
                b_bar,
                c,
                x,
                ref states,
            } => {
                let (l, e) = self.value(x).dims2("scan").expect("checked");
                let h = self.shape(c)[1];
                let (av, bv, cv, xv) = (self.data(a_bar), self.data(b_bar), self.data(c), self.data(x));
                let step = e * h;
                let mut g_a = vec![0.0; l * step];
                let mut g_b = vec![0.0; l * step];
                let mut g_c = vec![0.0; l * h];
                let mut g_x = vec![0.0; l * e];
                // Adjoint of h_l, carried backwards through Â.
                let mut dh = vec![0.0; step];
                for t in (0..l).rev() {
                    for ch in 0..e {
                        let gy = g[t * e + ch];
                        let base = t * step + ch * h;
                        let mut gx = 0.0;
                        for s in 0..h {
                            let i = ch * h + s;
                            let carried = if t + 1 < l { av[(t + 1) * step + i] * dh[i] } else { 0.0 };
                            let d = cv[t * h + s] * gy + carried;
                            dh[i] = d;
                            g_c[t * h + s] += gy * states[base + s];
                            let prev = if t == 0 { 0.0 } else { states[base - step + s] };
                            g_a[base + s] = d * prev;
                            g_b[base + s] = d * xv[t * e + ch];
                            gx += d * bv[base + s];
                        }
                        g_x[t * e + ch] = gx;
                    }
                }
                for (v, buf) in [(a_bar, g_a), (b_bar, g_b), (c, g_c), (x, g_x)] {
                    if self.needs(v) {
                        accumulate_owned(grads, v, buf);
                    }
                }
            }
            Op::PairwiseSqDist(a) => {
                let (n, d) = self.value(a).dims2("pairwise_sq_dist").expect("checked");
                let p = self.data(a);
                add(a, &mut |ga| {
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let w = 2.0 * g[i * n + j];
                            for k in 0..d {
                                let diff = p[i * d + k] - p[j * d + k];
                                ga[i * d + k] += w * diff;
                                ga[j * d + k] -= w * diff;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: &mut dyn FnMut(&mut [f64])) {
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Like [`accumulate`] but takes ownership of a full-size contribution.
fn accumulate_owned(grads: &mut [Option<Vec<f64>>], v: Var, buf: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => axpy(existing, &buf, 1.0),
        slot => *slot = Some(buf),
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = var(&mut tape, &[3], vec![1.0, -2.0, 0.5]);
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = var(&mut tape, &[2], vec![1.0, 2.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = var(&mut tape, &[2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn reuse_accumulates_exactly() {
        let data = vec![0.3, -1.2, 2.5, 0.7];
        let single = |tape: &mut Tape, x: Var| {
            let y = tape.activation(x, Activation::Silu).unwrap();
            tape.sum(y).unwrap()
        };
        let mut t1 = Tape::new();
        let x1 = var(&mut t1, &[4], data.clone());
        let l1 = single(&mut t1, x1);
        let g1 = t1.backward(l1).unwrap().wrt(x1).unwrap().to_vec();

        let mut t2 = Tape::new();
        let x2 = var(&mut t2, &[4], data);
        let a = single(&mut t2, x2);
        let b = single(&mut t2, x2);
        let l2 = t2.add(a, b).unwrap();
        let g2 = t2.backward(l2).unwrap();
        let doubled: Vec<f64> = g1.iter().map(|v| v + v).collect();
        assert_eq!(g2.wrt(x2).unwrap(), doubled.as_slice());
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::ones(vec![2]));
        let x = var(&mut tape, &[2], vec![1.0, 2.0]);
        let p = tape.mul(c, x).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn first_non_finite_names_the_op() {
        let mut tape = Tape::new();
        let x = var(&mut tape, &[2], vec![1000.0, 1.0]);
        let y = tape.activation(x, Activation::Exp).unwrap();
        let _ = tape.activation(y, Activation::Exp).unwrap();
        assert_eq!(tape.first_non_finite().unwrap(), "exp output (node 1)");
    }
}
