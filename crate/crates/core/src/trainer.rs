//! Minibatch Adam training for deep GPs and the DNN baseline.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Model;
use crate::dnn::DnnModel;
use crate::error::{Error, Result};
use crate::model::{Batch, DgpArchitecture, DgpModel};
use crate::params::{ParamMap, Parameterized};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// RNG stream ids derived from the training seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_SAMPLES: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Monte Carlo samples per ELBO evaluation.
    pub n_samples: usize,
    pub seed: u64,
    /// Copies of each target-speaker training frame per epoch.
    pub oversample_factor: usize,
    /// Parameters whose names start with one of these prefixes stay fixed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frozen: Vec<String>,
}

impl TrainConfig {
    pub fn dgp_default() -> Self {
        TrainConfig {
            batch_size: 1024,
            epochs: 50,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            n_samples: 1,
            seed: 0,
            oversample_factor: 20,
            frozen: Vec::new(),
        }
    }

    pub fn dnn_default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 1e-4,
            ..TrainConfig::dgp_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1");
        }
        if self.oversample_factor == 0 {
            return bad("oversample_factor must be at least 1");
        }
        Ok(())
    }
}

/// First and second moments per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamMap,
    pub v: ParamMap,
}

/// One bias-corrected Adam update. `ascend` selects maximization.
/// Parameters without a gradient entry are left untouched.
pub fn adam_step(
    params: &mut impl Parameterized,
    grads: &ParamMap,
    state: &mut AdamState,
    config: &TrainConfig,
    ascend: bool,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let sign = if ascend { 1.0 } else { -1.0 };
    params.visit_params_mut(&mut |name, p| {
        let Some(g) = grads.get(name) else { return };
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = config.beta1 * m.data()[i] + (1.0 - config.beta1) * gi;
            let vi = config.beta2 * v.data()[i] + (1.0 - config.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = (mi / c1) / ((vi / c2).sqrt() + config.epsilon);
            p.data_mut()[i] += sign * config.learning_rate * update;
        }
    });
}

/// Frame-level training data with per-frame replication counts.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub x: Tensor,
    pub y: Tensor,
    pub speakers: Vec<usize>,
    /// Copies of each frame per epoch.
    pub repeats: Vec<usize>,
}

impl TrainData {
    pub fn new(x: Tensor, y: Tensor, speakers: Vec<usize>) -> Self {
        let repeats = vec![1; x.rows()];
        TrainData {
            x,
            y,
            speakers,
            repeats,
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replicated frame indices in canonical (unshuffled) order.
    pub fn epoch_indices(&self) -> Vec<usize> {
        self.repeats
            .iter()
            .enumerate()
            .flat_map(|(i, &r)| std::iter::repeat_n(i, r))
            .collect()
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Tensor, Vec<usize>) {
        let pick = |t: &Tensor| {
            let c = t.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(idx.len(), c, data)
        };
        (
            pick(&self.x),
            pick(&self.y),
            idx.iter().map(|&i| self.speakers[i]).collect(),
        )
    }
}

/// Models trainable by [`train`].
pub trait Trainable: Parameterized {
    /// True when the objective is maximized (ELBO), false for losses.
    const ASCEND: bool;

    fn objective_and_grad(
        &self,
        batch: Batch<'_>,
        n_total: usize,
        config: &TrainConfig,
        rng: &mut Rng,
    ) -> Result<(f64, ParamMap)>;
}

impl Trainable for DgpModel {
    const ASCEND: bool = true;

    fn objective_and_grad(
        &self,
        batch: Batch<'_>,
        n_total: usize,
        config: &TrainConfig,
        rng: &mut Rng,
    ) -> Result<(f64, ParamMap)> {
        self.elbo_and_grad(batch, n_total, config.n_samples, &config.frozen, rng)
    }
}

impl Trainable for DnnModel {
    const ASCEND: bool = false;

    fn objective_and_grad(
        &self,
        batch: Batch<'_>,
        _n_total: usize,
        config: &TrainConfig,
        _rng: &mut Rng,
    ) -> Result<(f64, ParamMap)> {
        self.mse_and_grad(batch.x, batch.y, batch.speakers, &config.frozen)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    /// Mean minibatch objective over the epoch (ELBO or MSE).
    pub objective: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn objectives(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.objective).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,objective,wall_ms\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:?},{}\n", r.epoch, r.objective, r.wall_ms));
        }
        s
    }
}

/// Run `config.epochs` epochs of shuffled minibatch Adam.
///
/// `N_total` in the ELBO is the replicated epoch length, so oversampled
/// frames count once per copy.
pub fn train<M: Trainable>(model: &mut M, data: &TrainData, config: &TrainConfig) -> Result<Trace> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    let mut shuffle_rng = Rng::stream(config.seed, STREAM_SHUFFLE);
    let mut sample_rng = Rng::stream(config.seed, STREAM_SAMPLES);
    let mut state = AdamState::default();
    let mut trace = Trace::default();
    let start = Instant::now();
    let canonical = data.epoch_indices();
    let n_total = canonical.len();
    for epoch in 1..=config.epochs {
        let mut order = canonical.clone();
        shuffle_rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut batches = 0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let (x, y, speakers) = data.gather(idx);
            let batch = Batch {
                x: &x,
                y: &y,
                speakers: &speakers,
            };
            let (value, grads) = match model.objective_and_grad(batch, n_total, config, &mut sample_rng) {
                Err(Error::NotPositiveDefinite { .. }) => {
                    return Err(Error::DivergenceDetected { epoch, step })
                }
                other => other?,
            };
            if !value.is_finite() || grads.values().any(|g| !g.all_finite()) {
                return Err(Error::DivergenceDetected { epoch, step });
            }
            adam_step(model, &grads, &mut state, config, M::ASCEND);
            sum += value;
            batches += 1;
        }
        let objective = sum / batches as f64;
        log::info!("epoch {epoch}: objective {objective:.6}");
        trace.rows.push(TraceRow {
            epoch,
            objective,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(trace)
}

/// Deep GP initialized from the `STREAM_INIT` stream of `seed`.
pub fn init_model(arch: DgpArchitecture, seed: u64) -> Result<DgpModel> {
    DgpModel::init(arch, &mut Rng::stream(seed, STREAM_INIT))
}

/// Train either model kind in place.
pub fn train_model(model: &mut Model, data: &TrainData, config: &TrainConfig) -> Result<Trace> {
    match model {
        Model::Dgp(m) => train(m, data, config),
        Model::Dnn(m) => train(m, data, config),
    }
}

/// Visits per frame index in one epoch ordering.
pub fn visit_counts(order: &[usize]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for &i in order {
        *counts.entry(i).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Tensor);

    impl Parameterized for Scalar {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("theta", &self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("theta", &mut self.0)
        }
    }

    fn grads(g: f64) -> ParamMap {
        [("theta".to_string(), Tensor::scalar(g))].into_iter().collect()
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut p = Scalar(Tensor::scalar(0.0));
        let mut state = AdamState::default();
        adam_step(&mut p, &grads(0.5), &mut state, &TrainConfig::dgp_default(), false);
        assert!((p.0.item() + 0.01).abs() < 1e-6);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Scalar(Tensor::scalar(1.5));
        let mut state = AdamState::default();
        for _ in 0..3 {
            adam_step(&mut p, &grads(0.0), &mut state, &TrainConfig::dgp_default(), true);
        }
        assert_eq!(p.0.item(), 1.5);
    }

    #[test]
    fn adam_is_a_pure_transition() {
        let run = || {
            let mut p = Scalar(Tensor::scalar(0.3));
            let mut state = AdamState::default();
            for g in [0.1, -2.0, 0.7, 0.0, 3.0] {
                adam_step(&mut p, &grads(g), &mut state, &TrainConfig::dgp_default(), true);
            }
            (p.0, state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn replicated_indices() {
        let mut d = TrainData::new(Tensor::zeros(&[3, 1]), Tensor::zeros(&[3, 1]), vec![0, 1, 1]);
        d.repeats = vec![1, 20, 2];
        let counts = visit_counts(&d.epoch_indices());
        assert_eq!(counts[&1], 20);
        assert_eq!(counts[&2], 2);
        assert_eq!(d.epoch_indices().len(), 23);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::dgp_default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::dnn_default();
        assert_eq!((c.epochs, c.learning_rate), (100, 1e-4));
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }
}
