//! Loss, Adam, and the mini-batch training loop.
//!
//! Each optimizer step computes the graph quantities (Chebyshev basis and
//! factorized filters) once on a shared tape, runs per-sample forward and
//! backward passes in parallel against a read-only snapshot, sums the
//! per-sample gradients in sample order, and finally pushes the summed graph
//! adjoints back through the shared tape. The fixed reduction order makes
//! results independent of the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agc::{agc_head, build_graph, GraphOutputs};
use crate::bimamba::bimamba_stack_forward;
use crate::data::Sample;
use crate::metrics::rmse;
use crate::model::{bind_graph, SambaModel};
use crate::params::{self, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite value in {location} at epoch {epoch}")]
    NonFinite { epoch: usize, location: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("prediction and target lengths differ ({pred} vs {target})")]
    LengthMismatch { pred: usize, target: usize },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 1500,
            batch_size: 128,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(TrainError::Config(msg.to_owned()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("`lr` must be positive");
        }
        if self.epochs == 0 {
            return fail("`epochs` must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("`batch_size` must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("`beta1` and `beta2` must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return fail("`eps` must be positive");
        }
        Ok(())
    }
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let sq: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sq / pred.len() as f64)
}

/// `∂mse/∂pred = 2(pred − target)/B`.
pub fn mse_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_lengths(pred, target)?;
    let b = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / b).collect())
}

fn check_lengths(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(TrainError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    Ok(())
}

/// First and second moments in the flat parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over every tensor of `params`.
pub fn adam_step<P: ParamSet<Tensor>>(params: &mut P, grads: &[f64], state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut offset = 0;
    params.visit_mut("", &mut |_, tensor| {
        for (i, w) in tensor.data_mut().iter_mut().enumerate() {
            let j = offset + i;
            let g = grads[j];
            state.m[j] = cfg.beta1 * state.m[j] + (1.0 - cfg.beta1) * g;
            state.v[j] = cfg.beta2 * state.v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = state.m[j] / c1;
            let v_hat = state.v[j] / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        offset += tensor.len();
    });
    debug_assert_eq!(offset, grads.len());
}

/// Per-sample results in the layout `stack ‖ head ‖ T_1..T_K ‖ W_filter ‖ b_filter`.
struct SampleGrad {
    pred: f64,
    flat: Vec<f64>,
}

/// Mean squared error over `batch` and its gradient in parameter traversal order.
pub fn batch_gradient(model: &SambaModel, batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
    batch_gradient_at(model, batch, 0)
}

fn batch_gradient_at(model: &SambaModel, batch: &[&Sample], epoch: usize) -> Result<(f64, Vec<f64>)> {
    let non_finite = |location: String| TrainError::NonFinite { epoch, location };
    let p = &model.params;
    let mut graph_tape = Tape::new();
    let gv = params::bind(&mut graph_tape, &params::snapshot(&p.graph));
    let av = params::bind(&mut graph_tape, &params::snapshot(&p.agc));
    let graph = build_graph(&mut graph_tape, &gv, &av)?;
    if let Some(loc) = graph_tape.first_non_finite() {
        return Err(non_finite(loc));
    }
    let shared = GraphOutputs {
        basis: graph.basis.iter().map(|&v| graph_tape.shared_value(v)).collect(),
        w_filter: graph_tape.shared_value(graph.w_filter),
        b_filter: graph_tape.shared_value(graph.b_filter),
    };
    let stack = params::snapshot(&p.stack);
    let head = params::snapshot(&p.agc.head);
    let b = batch.len() as f64;

    let per_sample: Vec<std::result::Result<SampleGrad, TrainError>> = batch
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let sv = params::bind(&mut tape, &stack);
            let hv = params::bind(&mut tape, &head);
            let g = bind_graph(&mut tape, &shared, true);
            let x = tape.constant(s.x.clone());
            let y = bimamba_stack_forward(&mut tape, x, &sv)?;
            let out = agc_head(&mut tape, y, &g, &hv)?;
            let pred = tape.value(out).data()[0];
            if !pred.is_finite() {
                let loc = tape.first_non_finite().unwrap_or_else(|| "prediction".to_owned());
                return Err(non_finite(loc));
            }
            let seed = [2.0 * (pred - s.target) / b];
            let grads = tape.backward_from(&[(out, &seed)])?;
            let mut flat = params::flat_grads(&tape, &sv, &grads);
            flat.extend(params::flat_grads(&tape, &hv, &grads));
            for &v in g.basis.iter().skip(1).chain([&g.w_filter, &g.b_filter]) {
                flat.extend(grads.wrt_or_zero(v, tape.value(v).len()));
            }
            Ok(SampleGrad { pred, flat })
        })
        .collect();

    let mut loss = 0.0;
    let mut total: Vec<f64> = Vec::new();
    for (s, r) in batch.iter().zip(per_sample) {
        let r = r?;
        loss += (r.pred - s.target) * (r.pred - s.target);
        if total.is_empty() {
            total = r.flat;
        } else {
            total.iter_mut().zip(&r.flat).for_each(|(a, g)| *a += g);
        }
    }
    loss /= b;

    let n_stack = params::count(&stack);
    let n_head = params::count(&head);
    let mut offset = n_stack + n_head;
    let mut seeds: Vec<(Var, &[f64])> = Vec::new();
    for &v in graph.basis.iter().skip(1).chain([&graph.w_filter, &graph.b_filter]) {
        let len = graph_tape.value(v).len();
        seeds.push((v, &total[offset..offset + len]));
        offset += len;
    }
    let graph_grads = graph_tape.backward_from(&seeds)?;

    let mut flat = Vec::with_capacity(model.param_count());
    flat.extend_from_slice(&total[..n_stack]);
    flat.extend(params::flat_grads(&graph_tape, &gv, &graph_grads));
    flat.extend(graph_grads.wrt_or_zero(av.f_w, p.agc.f_w.len()));
    flat.extend(graph_grads.wrt_or_zero(av.f_b, p.agc.f_b.len()));
    flat.extend_from_slice(&total[n_stack..n_stack + n_head]);

    if let Some(i) = flat.iter().position(|g| !g.is_finite()) {
        return Err(non_finite(format!("gradient of {}", param_at(model, i))));
    }
    Ok((loss, flat))
}

/// Name of the parameter holding flat index `i`.
fn param_at(model: &SambaModel, i: usize) -> String {
    let mut offset = 0;
    let mut found = String::new();
    model.params.visit("", &mut |name, t| {
        if found.is_empty() && i < offset + t.len() {
            found = name.to_owned();
        }
        offset += t.len();
    });
    found
}

/// Predictions for many windows with the graph computed once.
pub fn predict_samples(model: &SambaModel, samples: &[Sample]) -> std::result::Result<Vec<f64>, TensorError> {
    let predictor = model.predictor()?;
    samples.par_iter().map(|s| predictor.predict(&s.x)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when there is no validation data.
    pub val_rmse: Option<f64>,
}

impl EpochRecord {
    fn score(&self) -> f64 {
        self.val_rmse.unwrap_or(self.train_loss)
    }
}

/// Epoch with the lowest validation RMSE (training loss without validation
/// data); the earliest wins ties.
pub fn best_epoch(history: &[EpochRecord]) -> Option<usize> {
    history
        .iter()
        .fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.score() <= r.score() => Some(b),
            _ => Some(r),
        })
        .map(|r| r.epoch)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the best epoch.
    pub model: SambaModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub fn train(model: SambaModel, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, cfg, |_, _| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    mut model: SambaModel,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &SambaModel),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(model.param_count());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, SambaModel)> = None;
    let val_targets: Vec<f64> = val_set.iter().map(|s| s.target).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sq_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradient_at(&model, &batch, epoch)?;
            sq_sum += loss * batch.len() as f64;
            adam_step(&mut model.params, &grads, &mut adam, cfg);
        }
        let train_loss = sq_sum / train_set.len() as f64;
        let val_rmse = if val_set.is_empty() {
            None
        } else {
            let preds = predict_samples(&model, val_set)?;
            if let Some(i) = preds.iter().position(|p| !p.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    location: format!("validation prediction {i}"),
                });
            }
            Some(rmse(&preds, &val_targets))
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_rmse,
        };
        if best.as_ref().is_none_or(|(score, _)| record.score() < *score) {
            best = Some((record.score(), model.clone()));
        }
        history.push(record);
        on_epoch(&record, &model);
    }
    let (_, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model: best_model,
        best_epoch: best_epoch(&history).expect("at least one epoch"),
        history,
    })
}
