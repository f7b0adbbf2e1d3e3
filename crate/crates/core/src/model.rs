//! The full forecaster: a stack of bidirectional Mamba layers feeding the
//! adaptive graph convolution head.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agc::{agc_head, build_graph, AgcParams, GraphOutputs, GraphParams};
use crate::bimamba::{bimamba_stack_forward, BiMambaStackParams};
use crate::mamba::CONV_WIDTH;
use crate::params::{self, join, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    /// Daily features (graph nodes).
    pub n: usize,
    /// Window length in days.
    pub l: usize,
    /// Mamba inner width.
    pub e: usize,
    /// SSM state size.
    pub h: usize,
    /// Hidden width of the time-mixing FFN.
    pub u: usize,
    /// Number of bidirectional layers.
    pub r: usize,
    /// Chebyshev order.
    pub k: usize,
    /// Node embedding dimension.
    pub d_e: usize,
}

impl Hyper {
    /// Reference configuration for the given feature count.
    pub fn default_for(n: usize) -> Self {
        Self {
            n,
            l: 5,
            e: 64,
            h: 64,
            u: 32,
            r: 3,
            k: 3,
            d_e: 10,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let positive = [
            ("n", self.n),
            ("l", self.l),
            ("e", self.e),
            ("h", self.h),
            ("u", self.u),
            ("r", self.r),
            ("d_e", self.d_e),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("hyperparameter `{name}` must be positive"));
        }
        if self.d_e >= self.n {
            return Err(format!(
                "embedding dimension d_e ({}) must be smaller than the feature count n ({})",
                self.d_e, self.n
            ));
        }
        Ok(())
    }

    /// Closed-form learnable parameter count.
    pub fn param_count(&self) -> usize {
        let Hyper { n, l, e, h, u, r, .. } = *self;
        let mamba = 2 * n * e + e * CONV_WIDTH + e + 2 * e * h + e * h + e * e + e + e * n;
        let layer = 2 * mamba + 2 * (2 * n) + (l * u + u) + (u * l + l);
        r * layer + self.agc_param_count()
    }

    /// Learnable scalars in the graph head: embeddings, kernel scale, `F_w`, `f_b`, head.
    pub fn agc_param_count(&self) -> usize {
        let Hyper { n, l, k, d_e, .. } = *self;
        n * d_e + 1 + d_e * (k + 1) * l + d_e + n
    }

    /// Non-learnable values stored with a trained model (min-max statistics).
    pub fn buffer_count(&self) -> usize {
        2 * self.n
    }

    /// Multiply-accumulate counts for one forward pass; see [`MacReport`].
    pub fn macs(&self) -> MacReport {
        let Hyper { n, l, e, h, u, r, k, d_e } = *self;
        let mamba = l * n * e * 2 + l * e * CONV_WIDTH + l * e * h * 2 + l * e * e + 3 * l * e * h + l * e * n;
        let ffn = 2 * n * l * u;
        let sequence = r * (2 * mamba + ffn) + (k + 1) * n * n * l;
        let chebyshev = k.saturating_sub(1) * n * n * n;
        MacReport {
            sequence: sequence as u64,
            head: n as u64,
            graph: (n * n * d_e + chebyshev + n * d_e * (k + 1) * l + n * d_e) as u64,
        }
    }
}

/// Multiply-accumulate operations of one forward pass.
///
/// Convention: every scalar multiply-add inside a matrix product, the depthwise
/// convolution, the squared-distance kernel, or the scan counts as one MAC; the
/// scan costs three per `(l, e, h)` (decay, input injection, readout).
/// Elementwise work (activations, gating, discretization, norms, the filter
/// contraction) is not counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MacReport {
    /// Work proportional to the window length: Mamba, FFN and graph propagation.
    pub sequence: u64,
    /// The `N→1` output projection.
    pub head: u64,
    /// Parameter-only work (adjacency, Chebyshev basis, filter factorization),
    /// computed once per batch or once at load time.
    pub graph: u64,
}

impl MacReport {
    /// Per-sample cost with the graph quantities cached.
    pub fn per_sample(&self) -> u64 {
        self.sequence + self.head
    }

    pub fn total(&self) -> u64 {
        self.sequence + self.head + self.graph
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SambaParams<T = Tensor> {
    pub stack: BiMambaStackParams<T>,
    pub graph: GraphParams<T>,
    pub agc: AgcParams<T>,
}

impl<T> ParamSet<T> for SambaParams<T> {
    type Of<U> = SambaParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> SambaParams<U> {
        SambaParams {
            stack: self.stack.map_named(&join(prefix, "stack"), f),
            graph: self.graph.map_named(&join(prefix, "graph"), f),
            agc: self.agc.map_named(&join(prefix, "agc"), f),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.stack.visit(&join(prefix, "stack"), f);
        self.graph.visit(&join(prefix, "graph"), f);
        self.agc.visit(&join(prefix, "agc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.stack.visit_mut(&join(prefix, "stack"), f);
        self.graph.visit_mut(&join(prefix, "graph"), f);
        self.agc.visit_mut(&join(prefix, "agc"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SambaModel {
    pub hyper: Hyper,
    pub params: SambaParams,
}

impl SambaModel {
    /// Deterministic initialization from `seed`.
    pub fn init(hyper: Hyper, seed: u64) -> Self {
        let Hyper { n, l, e, h, u, r, k, d_e } = hyper;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = BiMambaStackParams::init(&mut rng, r, n, l, e, h, u);
        let graph = GraphParams::init(&mut rng, n, d_e);
        let agc = AgcParams::init(&mut rng, n, l, k, d_e);
        Self {
            hyper,
            params: SambaParams { stack, graph, agc },
        }
    }

    /// Same layout as [`SambaModel::init`] with every tensor zero.
    pub fn zeros(hyper: Hyper) -> Self {
        let mut model = Self::init(hyper, 0);
        model
            .params
            .visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        model
    }

    pub fn param_count(&self) -> usize {
        params::count(&self.params)
    }

    pub fn param_names(&self) -> Vec<String> {
        params::names(&self.params)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != [self.hyper.l, self.hyper.n] {
            return Err(TensorError::ShapeMismatch {
                op: "samba_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.hyper.l, self.hyper.n],
            });
        }
        Ok(())
    }

    /// Scalar one-day return prediction for a window `x` (`L×N`).
    pub fn forward(&self, x: &Tensor) -> Result<f64> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = params::bind_constants(&mut tape, &self.params);
        let xv = tape.constant(x.clone());
        let out = forward_on_tape(&mut tape, xv, &vars)?;
        Ok(tape.value(out).data()[0])
    }

    /// Precomputes the graph quantities for repeated inference.
    pub fn predictor(&self) -> Result<Predictor<'_>> {
        let mut tape = Tape::new();
        let gv = params::bind_constants(&mut tape, &self.params.graph);
        let av = params::bind_constants(&mut tape, &self.params.agc);
        let graph = build_graph(&mut tape, &gv, &av)?;
        let graph = GraphOutputs {
            basis: graph.basis.iter().map(|&v| tape.shared_value(v)).collect(),
            w_filter: tape.shared_value(graph.w_filter),
            b_filter: tape.shared_value(graph.b_filter),
        };
        Ok(Predictor { model: self, graph })
    }
}

/// Inference with the graph quantities cached.
pub struct Predictor<'a> {
    model: &'a SambaModel,
    graph: GraphOutputs<Arc<Tensor>>,
}

impl Predictor<'_> {
    pub fn predict(&self, x: &Tensor) -> Result<f64> {
        self.model.check_input(x)?;
        let mut tape = Tape::new();
        let stack = params::bind_constants(&mut tape, &self.model.params.stack);
        let head = params::bind_constants(&mut tape, &self.model.params.agc.head);
        let graph = bind_graph(&mut tape, &self.graph, false);
        let xv = tape.constant(x.clone());
        let y = bimamba_stack_forward(&mut tape, xv, &stack)?;
        let out = agc_head(&mut tape, y, &graph, &head)?;
        Ok(tape.value(out).data()[0])
    }
}

/// Binds cached graph outputs as leaves; `T_0 = I` is never tracked.
pub(crate) fn bind_graph(tape: &mut Tape, g: &GraphOutputs<Arc<Tensor>>, track: bool) -> GraphOutputs<Var> {
    GraphOutputs {
        basis: g
            .basis
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf_shared(Arc::clone(t), track && i > 0, None))
            .collect(),
        w_filter: tape.leaf_shared(Arc::clone(&g.w_filter), track, Some("graph.w_filter")),
        b_filter: tape.leaf_shared(Arc::clone(&g.b_filter), track, Some("graph.b_filter")),
    }
}

/// Full forward pass recorded on one tape; returns a `1×1` node.
pub fn forward_on_tape(tape: &mut Tape, x: Var, p: &SambaParams<Var>) -> Result<Var> {
    let y = bimamba_stack_forward(tape, x, &p.stack)?;
    let graph = build_graph(tape, &p.graph, &p.agc)?;
    agc_head(tape, y, &graph, &p.agc.head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Hyper {
        Hyper {
            n: 6,
            l: 5,
            e: 8,
            h: 4,
            u: 4,
            r: 2,
            k: 2,
            d_e: 3,
        }
    }

    #[test]
    fn closed_form_count_matches_enumeration() {
        for hyper in [tiny(), Hyper::default_for(82), Hyper { k: 0, ..tiny() }] {
            let model = SambaModel::init(hyper, 1);
            assert_eq!(model.param_count(), hyper.param_count());
            let mut agc = 0;
            model.params.graph.visit("", &mut |_, t| agc += t.len());
            model.params.agc.visit("", &mut |_, t| agc += t.len());
            assert_eq!(agc, hyper.agc_param_count());
        }
    }

    #[test]
    fn zero_model_predicts_zero() {
        let model = SambaModel::zeros(tiny());
        let x = Tensor::from_fn(vec![5, 6], |i| (i as f64).sin());
        assert_eq!(model.forward(&x).unwrap(), 0.0);
    }

    #[test]
    fn predictor_matches_single_tape_forward() {
        let model = SambaModel::init(tiny(), 9);
        let x = Tensor::from_fn(vec![5, 6], |i| (i as f64 * 0.3).cos());
        let direct = model.forward(&x).unwrap();
        let cached = model.predictor().unwrap().predict(&x).unwrap();
        assert!(direct.is_finite());
        assert!((direct - cached).abs() < 1e-13);
        assert!(model.forward(&Tensor::ones(vec![4, 6])).is_err());
    }

    #[test]
    fn tape_mac_count_matches_closed_form() {
        for hyper in [tiny(), Hyper { k: 3, r: 1, ..tiny() }] {
            let model = SambaModel::init(hyper, 2);
            let mut tape = Tape::new();
            let vars = params::bind_constants(&mut tape, &model.params);
            let x = tape.constant(Tensor::ones(vec![hyper.l, hyper.n]));
            forward_on_tape(&mut tape, x, &vars).unwrap();
            assert_eq!(tape.macs(), hyper.macs().total());
        }
    }

    #[test]
    fn validation_rejects_bad_dims() {
        assert!(tiny().validate().is_ok());
        assert!(Hyper { d_e: 6, ..tiny() }.validate().is_err());
        assert!(Hyper { r: 0, ..tiny() }.validate().is_err());
    }
}
