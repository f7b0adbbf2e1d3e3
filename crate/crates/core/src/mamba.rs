//! Single-direction selective SSM unit.
//!
//! Input `X` (`L×N`) is projected to an `E`-wide stream and a gate, the stream
//! goes through a causal depthwise convolution and SiLU, the SSM parameters
//! `B`, `C` (`L×H`) and step sizes `Δ` (`L×E`) are read off the convolved
//! stream, and the selective scan output is gated by `SiLU(Z)` and projected
//! back to `N` features.

use rand::Rng;

use crate::params::{bind_constants, join, project, uniform, ParamSet, Projection};
use crate::tape::{Tape, Var};
use crate::tensor::{Activation, Result, Tensor, TensorError};

/// Causal convolution width.
pub const CONV_WIDTH: usize = 4;

/// Range of initial step sizes `softplus(bias)`.
pub const DELTA_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

#[derive(Debug, Clone, PartialEq)]
pub struct MambaParams<T = Tensor> {
    /// `N→E`, no bias.
    pub proj_x: Projection<T>,
    /// `N→E`, no bias.
    pub proj_z: Projection<T>,
    /// `E×CONV_WIDTH`.
    pub conv_kernel: T,
    /// `E`.
    pub conv_bias: T,
    /// `E→H`, no bias.
    pub proj_b: Projection<T>,
    /// `E→H`, no bias.
    pub proj_c: Projection<T>,
    /// `E×H` continuous dynamics.
    pub a: T,
    /// `E→E` with bias.
    pub proj_delta: Projection<T>,
    /// `E→N`, no bias.
    pub proj_out: Projection<T>,
}

impl MambaParams<Tensor> {
    pub fn init(rng: &mut impl Rng, n: usize, e: usize, h: usize) -> Self {
        let proj_x = Projection::init(rng, n, e, false);
        let proj_z = Projection::init(rng, n, e, false);
        let conv_bound = (1.0 / CONV_WIDTH as f64).sqrt();
        let conv_kernel = uniform(rng, vec![e, CONV_WIDTH], conv_bound);
        let conv_bias = uniform(rng, vec![e], conv_bound);
        let proj_b = Projection::init(rng, e, h, false);
        let proj_c = Projection::init(rng, e, h, false);
        let mut proj_delta = Projection::init(rng, e, e, true);
        // Log-uniform initial step sizes; the bias is the inverse softplus.
        let (lo, hi) = DELTA_INIT_RANGE;
        proj_delta.bias = Some(Tensor::from_fn(vec![e], |_| {
            let dt = (rng.random_range(lo.ln()..hi.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        }));
        let proj_out = Projection::init(rng, e, n, false);
        Self {
            proj_x,
            proj_z,
            conv_kernel,
            conv_bias,
            proj_b,
            proj_c,
            a: a_init(e, h),
            proj_delta,
            proj_out,
        }
    }

    pub fn zeros(n: usize, e: usize, h: usize) -> Self {
        Self {
            proj_x: Projection::zeros(n, e, false),
            proj_z: Projection::zeros(n, e, false),
            conv_kernel: Tensor::zeros(vec![e, CONV_WIDTH]),
            conv_bias: Tensor::zeros(vec![e]),
            proj_b: Projection::zeros(e, h, false),
            proj_c: Projection::zeros(e, h, false),
            a: Tensor::zeros(vec![e, h]),
            proj_delta: Projection::zeros(e, e, true),
            proj_out: Projection::zeros(e, n, false),
        }
    }

    /// `(N, E, H)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.proj_x.fan_in(), self.proj_x.fan_out(), self.proj_b.fan_out())
    }
}

/// `A[e, h] = −(h + 1)`.
pub fn a_init(e: usize, h: usize) -> Tensor {
    Tensor::from_fn(vec![e, h], |i| -((i % h) as f64 + 1.0))
}

impl<T> ParamSet<T> for MambaParams<T> {
    type Of<U> = MambaParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> MambaParams<U> {
        MambaParams {
            proj_x: self.proj_x.map_named(&join(prefix, "proj_x"), f),
            proj_z: self.proj_z.map_named(&join(prefix, "proj_z"), f),
            conv_kernel: f(&join(prefix, "conv_kernel"), &self.conv_kernel),
            conv_bias: f(&join(prefix, "conv_bias"), &self.conv_bias),
            proj_b: self.proj_b.map_named(&join(prefix, "proj_b"), f),
            proj_c: self.proj_c.map_named(&join(prefix, "proj_c"), f),
            a: f(&join(prefix, "a"), &self.a),
            proj_delta: self.proj_delta.map_named(&join(prefix, "proj_delta"), f),
            proj_out: self.proj_out.map_named(&join(prefix, "proj_out"), f),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.proj_x.visit(&join(prefix, "proj_x"), f);
        self.proj_z.visit(&join(prefix, "proj_z"), f);
        f(&join(prefix, "conv_kernel"), &self.conv_kernel);
        f(&join(prefix, "conv_bias"), &self.conv_bias);
        self.proj_b.visit(&join(prefix, "proj_b"), f);
        self.proj_c.visit(&join(prefix, "proj_c"), f);
        f(&join(prefix, "a"), &self.a);
        self.proj_delta.visit(&join(prefix, "proj_delta"), f);
        self.proj_out.visit(&join(prefix, "proj_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.proj_x.visit_mut(&join(prefix, "proj_x"), f);
        self.proj_z.visit_mut(&join(prefix, "proj_z"), f);
        f(&join(prefix, "conv_kernel"), &mut self.conv_kernel);
        f(&join(prefix, "conv_bias"), &mut self.conv_bias);
        self.proj_b.visit_mut(&join(prefix, "proj_b"), f);
        self.proj_c.visit_mut(&join(prefix, "proj_c"), f);
        f(&join(prefix, "a"), &mut self.a);
        self.proj_delta.visit_mut(&join(prefix, "proj_delta"), f);
        self.proj_out.visit_mut(&join(prefix, "proj_out"), f);
    }
}

/// Records one Mamba pass over `x` (`L×N`) and returns the `L×N` output.
pub fn mamba_forward(tape: &mut Tape, x: Var, p: &MambaParams<Var>) -> Result<Var> {
    let x_proj = project(tape, x, &p.proj_x)?;
    let z_proj = project(tape, x, &p.proj_z)?;
    let conv = tape.depthwise_conv1d(x_proj, p.conv_kernel, p.conv_bias)?;
    let stream = tape.activation(conv, Activation::Silu)?;
    let b = project(tape, stream, &p.proj_b)?;
    let c = project(tape, stream, &p.proj_c)?;
    let delta_pre = project(tape, stream, &p.proj_delta)?;
    let delta = tape.activation(delta_pre, Activation::Softplus)?;
    let a_bar = tape.zoh_a(p.a, delta)?;
    let b_bar = tape.zoh_b(p.a, delta, b)?;
    let y = tape.selective_scan(a_bar, b_bar, c, stream)?;
    let gate = tape.activation(z_proj, Activation::Silu)?;
    let gated = tape.mul(y, gate)?;
    project(tape, gated, &p.proj_out)
}

/// Value-level convenience wrapper around [`mamba_forward`].
pub fn mamba(x: &Tensor, p: &MambaParams) -> Result<Tensor> {
    let (n, _, _) = p.dims();
    if x.rank() != 2 || x.shape()[1] != n {
        return Err(TensorError::ShapeMismatch {
            op: "mamba",
            lhs: x.shape().to_vec(),
            rhs: p.proj_x.weight.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = bind_constants(&mut tape, p);
    let out = mamba_forward(&mut tape, xv, &pv)?;
    Ok(tape.value(out).clone())
}
