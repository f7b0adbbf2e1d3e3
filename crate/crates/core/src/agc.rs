//! Adaptive graph convolution over daily features.
//!
//! Each of the `N` features is a node with a learnable embedding. Squared
//! embedding distances pass through a Gaussian kernel `exp(−ψ·D)` and a
//! row-wise softmax to give the adjacency `Ã`. The filter bank is Chebyshev
//! polynomials `T_0..T_K` of `Ã`; per-node temporal filter weights are
//! factorized through the same embeddings (`W = Ψ ⊗ F_w`, `b = Ψ·f_b`).
//!
//! For an input `Y` (`L×N`):
//! `o′[n] = Σ_k Σ_l (T_k·Yᵀ)[n,l]·W[n,k,l] + b[n]` and the prediction is the
//! bias-free projection of `o′` to a scalar.

use rand::Rng;

use crate::params::{bind_constants, join, project, uniform, ParamSet, Projection};
use crate::tape::{Tape, Var};
use crate::tensor::{Activation, Result, Tensor, TensorError};

/// Node embeddings and the kernel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphParams<T = Tensor> {
    /// `N×d_e`.
    pub psi: T,
    /// `[1]`; the kernel scale is `exp(log_scale)` so it stays positive.
    pub log_scale: T,
}

impl GraphParams<Tensor> {
    pub fn init(rng: &mut impl Rng, n: usize, d_e: usize) -> Self {
        Self {
            psi: uniform(rng, vec![n, d_e], 0.5),
            log_scale: Tensor::scalar(0.0),
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.data()[0].exp()
    }

    pub fn nodes(&self) -> usize {
        self.psi.shape()[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.psi.shape()[1]
    }
}

impl<T> ParamSet<T> for GraphParams<T> {
    type Of<U> = GraphParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> GraphParams<U> {
        GraphParams {
            psi: f(&join(prefix, "psi"), &self.psi),
            log_scale: f(&join(prefix, "log_scale"), &self.log_scale),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(&join(prefix, "psi"), &self.psi);
        f(&join(prefix, "log_scale"), &self.log_scale);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "psi"), &mut self.psi);
        f(&join(prefix, "log_scale"), &mut self.log_scale);
    }
}

/// Factorized filter weights and the output head.
#[derive(Debug, Clone, PartialEq)]
pub struct AgcParams<T = Tensor> {
    /// `d_e×(K+1)×L`.
    pub f_w: T,
    /// `d_e`.
    pub f_b: T,
    /// `N→1`, no bias.
    pub head: Projection<T>,
}

impl AgcParams<Tensor> {
    pub fn init(rng: &mut impl Rng, n: usize, l: usize, k: usize, d_e: usize) -> Self {
        let bound = (1.0 / ((k + 1) * l) as f64).sqrt();
        Self {
            f_w: uniform(rng, vec![d_e, k + 1, l], bound),
            f_b: Tensor::zeros(vec![d_e]),
            // The untrained model predicts exactly 0.
            head: Projection::zeros(n, 1, false),
        }
    }

    /// Chebyshev order `K`.
    pub fn order(&self) -> usize {
        self.f_w.shape()[1] - 1
    }

    pub fn window(&self) -> usize {
        self.f_w.shape()[2]
    }
}

impl<T> ParamSet<T> for AgcParams<T> {
    type Of<U> = AgcParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AgcParams<U> {
        AgcParams {
            f_w: f(&join(prefix, "f_w"), &self.f_w),
            f_b: f(&join(prefix, "f_b"), &self.f_b),
            head: self.head.map_named(&join(prefix, "head"), f),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(&join(prefix, "f_w"), &self.f_w);
        f(&join(prefix, "f_b"), &self.f_b);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "f_w"), &mut self.f_w);
        f(&join(prefix, "f_b"), &mut self.f_b);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Parameter-only quantities shared by every sample in a batch.
#[derive(Debug, Clone)]
pub struct GraphOutputs<V> {
    /// `T_0..T_K`, each `N×N`.
    pub basis: Vec<V>,
    /// `N×(K+1)·L`, column `k·L + l` holds `W_Filter[:, k, l]`.
    pub w_filter: V,
    /// `[N]`.
    pub b_filter: V,
}

pub fn adjacency_on(tape: &mut Tape, g: &GraphParams<Var>) -> Result<Var> {
    let dist = tape.pairwise_sq_dist(g.psi)?;
    let scale = tape.activation(g.log_scale, Activation::Exp)?;
    let scaled = tape.scale_by(dist, scale)?;
    let neg = tape.scale(scaled, -1.0)?;
    let kernel = tape.activation(neg, Activation::Exp)?;
    tape.softmax_rows(kernel)
}

/// `T_0 = I`, `T_1 = Ã`, `T_n = 2·Ã·T_{n−1} − T_{n−2}`.
pub fn chebyshev_on(tape: &mut Tape, a: Var, k: usize) -> Result<Vec<Var>> {
    let (n, m) = tape.value(a).dims2("chebyshev_basis")?;
    if n != m {
        return Err(TensorError::ShapeMismatch {
            op: "chebyshev_basis",
            lhs: vec![n, m],
            rhs: vec![n, n],
        });
    }
    let mut basis = vec![tape.constant(Tensor::eye(n))];
    if k >= 1 {
        basis.push(a);
    }
    for i in 2..=k {
        let prod = tape.matmul(a, basis[i - 1])?;
        let twice = tape.scale(prod, 2.0)?;
        basis.push(tape.sub(twice, basis[i - 2])?);
    }
    Ok(basis)
}

/// `(W_Filter as N×(K+1)·L, b_Filter as [N])`.
pub fn filters_on(tape: &mut Tape, g: &GraphParams<Var>, a: &AgcParams<Var>) -> Result<(Var, Var)> {
    let fw_shape = tape.shape(a.f_w).to_vec();
    let [d_e, k1, l] = fw_shape[..] else {
        return Err(TensorError::Rank {
            op: "materialize_filters",
            expected: 3,
            got: fw_shape,
        });
    };
    let fw = tape.reshape(a.f_w, &[d_e, k1 * l])?;
    let w = tape.matmul(g.psi, fw)?;
    let fb = tape.reshape(a.f_b, &[d_e, 1])?;
    let b = tape.matmul(g.psi, fb)?;
    let n = tape.shape(g.psi)[0];
    let b = tape.reshape(b, &[n])?;
    Ok((w, b))
}

pub fn build_graph(tape: &mut Tape, g: &GraphParams<Var>, a: &AgcParams<Var>) -> Result<GraphOutputs<Var>> {
    let k = tape.shape(a.f_w).get(1).map_or(1, |k1| k1.saturating_sub(1));
    let adjacency = adjacency_on(tape, g)?;
    let basis = chebyshev_on(tape, adjacency, k)?;
    let (w_filter, b_filter) = filters_on(tape, g, a)?;
    Ok(GraphOutputs {
        basis,
        w_filter,
        b_filter,
    })
}

/// Graph filtering of `y` (`L×N`) followed by the scalar head; returns a `1×1` node.
pub fn agc_head(tape: &mut Tape, y: Var, graph: &GraphOutputs<Var>, head: &Projection<Var>) -> Result<Var> {
    let (l, n) = tape.value(y).dims2("agc")?;
    let expected = [n, graph.basis.len() * l];
    if tape.shape(graph.w_filter) != expected || tape.shape(graph.basis[0]) != [n, n] {
        return Err(TensorError::ShapeMismatch {
            op: "agc",
            lhs: tape.shape(y).to_vec(),
            rhs: tape.shape(graph.w_filter).to_vec(),
        });
    }
    let yt = tape.transpose(y)?;
    let propagated = graph
        .basis
        .iter()
        .map(|&t| tape.matmul(t, yt))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_cols(&propagated)?;
    let filtered = tape.mul(stacked, graph.w_filter)?;
    let summed = tape.row_sum(filtered)?;
    let o_prime = tape.add(summed, graph.b_filter)?;
    let row = tape.reshape(o_prime, &[1, n])?;
    project(tape, row, head)
}

pub fn agc_forward(tape: &mut Tape, y: Var, g: &GraphParams<Var>, a: &AgcParams<Var>) -> Result<Var> {
    let graph = build_graph(tape, g, a)?;
    agc_head(tape, y, &graph, &a.head)
}

/// Value-level `Ã`.
pub fn build_adjacency(g: &GraphParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gv = bind_constants(&mut tape, g);
    let a = adjacency_on(&mut tape, &gv)?;
    Ok(tape.value(a).clone())
}

/// Value-level Chebyshev basis of an `N×N` matrix.
pub fn chebyshev_basis(a: &Tensor, k: usize) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let basis = chebyshev_on(&mut tape, av, k)?;
    Ok(basis.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// `(W_Filter: N×(K+1)×L, b_Filter: N)`.
pub fn materialize_filters(g: &GraphParams, a: &AgcParams) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let gv = bind_constants(&mut tape, g);
    let av = bind_constants(&mut tape, a);
    let (w, b) = filters_on(&mut tape, &gv, &av)?;
    let n = g.nodes();
    let shape = a.f_w.shape();
    Ok((tape.value(w).reshape(vec![n, shape[1], shape[2]])?, tape.value(b).clone()))
}

/// Value-level scalar prediction from a stack output `y` (`L×N`).
pub fn agc(y: &Tensor, g: &GraphParams, a: &AgcParams) -> Result<f64> {
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let gv = bind_constants(&mut tape, g);
    let av = bind_constants(&mut tape, a);
    let out = agc_forward(&mut tape, yv, &gv, &av)?;
    Ok(tape.value(out).data()[0])
}
