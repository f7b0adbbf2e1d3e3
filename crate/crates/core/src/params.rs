//! Named parameter trees.
//!
//! Every parameter struct is generic over its leaf type so the same layout can
//! hold owned tensors, shared snapshots, tape handles, or gradients. Traversal
//! order is fixed and defines the flat layout used by the optimizer and the
//! checkpoint format.

use std::sync::Arc;

use rand::Rng;

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Result, Tensor};

pub trait ParamSet<T> {
    type Of<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Of<U>;

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Shares every tensor behind an `Arc` so it can be bound into many tapes.
pub fn snapshot<P: ParamSet<Tensor>>(p: &P) -> P::Of<Arc<Tensor>> {
    p.map_named("", &mut |_, t| Arc::new(t.clone()))
}

/// Binds a snapshot as gradient-tracked leaves named by their paths.
pub fn bind<P: ParamSet<Arc<Tensor>>>(tape: &mut Tape, p: &P) -> P::Of<Var> {
    p.map_named("", &mut |name, t| tape.leaf_shared(Arc::clone(t), true, Some(name)))
}

/// Binds owned tensors as untracked constants.
pub fn bind_constants<P: ParamSet<Tensor>>(tape: &mut Tape, p: &P) -> P::Of<Var> {
    p.map_named("", &mut |name, t| tape.leaf_shared(Arc::new(t.clone()), false, Some(name)))
}

pub fn count<T: AsRef<Tensor>, P: ParamSet<T>>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.as_ref().len());
    n
}

pub fn names<T, P: ParamSet<T>>(p: &P) -> Vec<String> {
    let mut out = Vec::new();
    p.visit("", &mut |name, _| out.push(name.to_owned()));
    out
}

/// Concatenates the gradients of bound variables in traversal order.
pub fn flat_grads<P: ParamSet<Var>>(tape: &Tape, vars: &P, grads: &Gradients) -> Vec<f64> {
    let mut out = Vec::new();
    vars.visit("", &mut |_, &v| out.extend(grads.wrt_or_zero(v, tape.value(v).len())));
    out
}

/// All values in traversal order.
pub fn flatten<P: ParamSet<Tensor>>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

/// Inverse of [`flatten`]; `values` must have exactly [`count`] entries.
pub fn assign_flat<P: ParamSet<Tensor>>(p: &mut P, values: &[f64]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, t| {
        let n = t.len();
        t.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    });
    assert_eq!(offset, values.len(), "flat parameter length");
}

impl AsRef<Tensor> for Tensor {
    fn as_ref(&self) -> &Tensor {
        self
    }
}

/// `Q·W (+ b)`, the linear projection used throughout the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T = Tensor> {
    /// `in×out`.
    pub weight: T,
    pub bias: Option<T>,
}

impl Projection<Tensor> {
    /// Uniform in `±sqrt(1/fan_in)` for the weight and, when present, the bias.
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, with_bias: bool) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let weight = uniform(rng, vec![fan_in, fan_out], bound);
        let bias = with_bias.then(|| uniform(rng, vec![fan_out], bound));
        Self { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, with_bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: with_bias.then(|| Tensor::zeros(vec![fan_out])),
        }
    }

    pub fn has_bias(&self) -> bool {
        self.bias.is_some()
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<T> ParamSet<T> for Projection<T> {
    type Of<U> = Projection<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Projection<U> {
        Projection {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&join(prefix, "bias"), b)),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Applies a projection on the tape.
pub fn project(tape: &mut Tape, q: Var, p: &Projection<Var>) -> Result<Var> {
    let out = tape.matmul(q, p.weight)?;
    match p.bias {
        Some(b) => tape.add_bias(out, b),
        None => Ok(out),
    }
}

/// Value-level projection.
pub fn projection(q: &Tensor, p: &Projection) -> Result<Tensor> {
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let pv = bind_constants(&mut tape, p);
    let out = project(&mut tape, qv, &pv)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

impl LayerNormParams<Tensor> {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::ones(vec![width]),
            beta: Tensor::zeros(vec![width]),
        }
    }
}

impl<T> ParamSet<T> for LayerNormParams<T> {
    type Of<U> = LayerNormParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            beta: f(&join(prefix, "beta"), &self.beta),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_projection() {
        let q = Tensor::from_fn(vec![3, 2], |i| i as f64 - 2.5);
        let p = Projection {
            weight: Tensor::eye(2),
            bias: None,
        };
        assert_eq!(projection(&q, &p).unwrap(), q);
    }

    #[test]
    fn zero_weight_projection_broadcasts_bias() {
        let q = Tensor::from_fn(vec![3, 2], |i| i as f64);
        let p = Projection {
            weight: Tensor::zeros(vec![2, 2]),
            bias: Some(Tensor::new(vec![2], vec![0.5, -1.0]).unwrap()),
        };
        let out = projection(&q, &p).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.5, -1.0]);
        }
    }

    #[test]
    fn hand_projection() {
        let q = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let p = Projection {
            weight: Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(),
            bias: Some(Tensor::scalar(1.0)),
        };
        assert_eq!(projection(&q, &p).unwrap().data(), &[4.0]);
        let bad = Tensor::ones(vec![1, 3]);
        assert!(projection(&bad, &p).is_err());
    }

    #[test]
    fn names_follow_traversal_order() {
        let p = Projection::zeros(2, 3, true);
        assert_eq!(names(&p), ["weight", "bias"]);
        assert_eq!(count(&p), 9);
        let mut named = Vec::new();
        p.visit("layer", &mut |n, _| named.push(n.to_owned()));
        assert_eq!(named, ["layer.weight", "layer.bias"]);
    }
}
