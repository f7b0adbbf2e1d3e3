//! Bidirectional Mamba layers.
//!
//! One layer runs a forward Mamba on `X` and an independent Mamba on the
//! time-reversed input, fuses both with the input under a layer norm, then
//! applies a feed-forward network across the `L` time positions of each
//! feature (it acts on `Y₃ᵀ`) with a second residual layer norm.

use rand::Rng;

use crate::mamba::{mamba_forward, MambaParams};
use crate::params::{bind_constants, join, project, LayerNormParams, ParamSet, Projection};
use crate::tape::{Tape, Var};
use crate::tensor::{Activation, Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct BiMambaLayerParams<T = Tensor> {
    pub fwd: MambaParams<T>,
    pub bwd: MambaParams<T>,
    pub norm1: LayerNormParams<T>,
    /// `L→U` with bias.
    pub ffn_in: Projection<T>,
    /// `U→L` with bias.
    pub ffn_out: Projection<T>,
    pub norm2: LayerNormParams<T>,
}

impl BiMambaLayerParams<Tensor> {
    pub fn init(rng: &mut impl Rng, n: usize, l: usize, e: usize, h: usize, u: usize) -> Self {
        Self {
            fwd: MambaParams::init(rng, n, e, h),
            bwd: MambaParams::init(rng, n, e, h),
            norm1: LayerNormParams::new(n),
            ffn_in: Projection::init(rng, l, u, true),
            ffn_out: Projection::init(rng, u, l, true),
            norm2: LayerNormParams::new(n),
        }
    }
}

impl<T> ParamSet<T> for BiMambaLayerParams<T> {
    type Of<U> = BiMambaLayerParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BiMambaLayerParams<U> {
        BiMambaLayerParams {
            fwd: self.fwd.map_named(&join(prefix, "fwd"), f),
            bwd: self.bwd.map_named(&join(prefix, "bwd"), f),
            norm1: self.norm1.map_named(&join(prefix, "norm1"), f),
            ffn_in: self.ffn_in.map_named(&join(prefix, "ffn_in"), f),
            ffn_out: self.ffn_out.map_named(&join(prefix, "ffn_out"), f),
            norm2: self.norm2.map_named(&join(prefix, "norm2"), f),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.fwd.visit(&join(prefix, "fwd"), f);
        self.bwd.visit(&join(prefix, "bwd"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ffn_in.visit(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit(&join(prefix, "ffn_out"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.fwd.visit_mut(&join(prefix, "fwd"), f);
        self.bwd.visit_mut(&join(prefix, "bwd"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiMambaStackParams<T = Tensor> {
    pub layers: Vec<BiMambaLayerParams<T>>,
}

impl BiMambaStackParams<Tensor> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(rng: &mut impl Rng, r: usize, n: usize, l: usize, e: usize, h: usize, u: usize) -> Self {
        Self {
            layers: (0..r).map(|_| BiMambaLayerParams::init(rng, n, l, e, h, u)).collect(),
        }
    }
}

impl<T> ParamSet<T> for BiMambaStackParams<T> {
    type Of<U> = BiMambaStackParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BiMambaStackParams<U> {
        BiMambaStackParams {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, layer)| layer.map_named(&join(prefix, &format!("layers.{i}")), f))
                .collect(),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

/// Row `l` of the output is row `L−1−l` of the input.
pub fn reverse_time(x: &Tensor) -> Tensor {
    let rows = x.shape()[0];
    let width = x.len() / rows;
    let data = (0..rows).rev().flat_map(|r| x.data()[r * width..(r + 1) * width].iter().copied()).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn bimamba_layer_forward(tape: &mut Tape, x: Var, p: &BiMambaLayerParams<Var>) -> Result<Var> {
    let y1 = mamba_forward(tape, x, &p.fwd)?;
    let x_rev = tape.reverse_rows(x)?;
    let y2 = mamba_forward(tape, x_rev, &p.bwd)?;
    let y2_rev = tape.reverse_rows(y2)?;
    let s = tape.add(x, y1)?;
    let s = tape.add(s, y2_rev)?;
    let y3 = tape.layer_norm(s, p.norm1.gamma, p.norm1.beta)?;
    let y3t = tape.transpose(y3)?;
    let hidden = project(tape, y3t, &p.ffn_in)?;
    let hidden = tape.activation(hidden, Activation::Relu)?;
    let mixed = project(tape, hidden, &p.ffn_out)?;
    let mixed = tape.transpose(mixed)?;
    let s2 = tape.add(mixed, y3)?;
    tape.layer_norm(s2, p.norm2.gamma, p.norm2.beta)
}

pub fn bimamba_stack_forward(tape: &mut Tape, x: Var, p: &BiMambaStackParams<Var>) -> Result<Var> {
    p.layers
        .iter()
        .try_fold(x, |acc, layer| bimamba_layer_forward(tape, acc, layer))
}

fn check_input(x: &Tensor, n: usize) -> Result<()> {
    if x.rank() != 2 || x.shape()[1] != n {
        return Err(TensorError::ShapeMismatch {
            op: "bimamba",
            lhs: x.shape().to_vec(),
            rhs: vec![n],
        });
    }
    Ok(())
}

/// Value-level layer application.
pub fn bimamba_layer(x: &Tensor, p: &BiMambaLayerParams) -> Result<Tensor> {
    check_input(x, p.fwd.dims().0)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = bind_constants(&mut tape, p);
    let out = bimamba_layer_forward(&mut tape, xv, &pv)?;
    Ok(tape.value(out).clone())
}

/// Value-level stack application.
pub fn bimamba_stack(x: &Tensor, p: &BiMambaStackParams) -> Result<Tensor> {
    if let Some(first) = p.layers.first() {
        check_input(x, first.fwd.dims().0)?;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = bind_constants(&mut tape, p);
    let out = bimamba_stack_forward(&mut tape, xv, &pv)?;
    Ok(tape.value(out).clone())
}
