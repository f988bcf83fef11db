//! Seeded Adam training, fine-tuning with a fresh head, and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{class_weights, Dataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::NamedTensorSet;
use crate::tinynet::{self, init_head, Batch, Mode, ModelState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults. The paper-scale learning rate is available through
    /// [`TrainConfig::paper_table4`].
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 64,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 3315,
        }
    }
}

impl TrainConfig {
    /// Profile name of [`TrainConfig::paper_table4`].
    pub const PAPER_PROFILE: &'static str = "paper-table4";

    /// `lr = 1e-5`, 64 epochs, batch 32, Adam, seed 3315.
    pub fn paper_table4() -> Self {
        Self {
            learning_rate: 1e-5,
            ..Self::default()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "desk" | "default" => Some(Self::default()),
            Self::PAPER_PROFILE => Some(Self::paper_table4()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("adam betas must be in [0, 1)".into()));
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return Err(Error::InvalidConfig("adam_epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// First and second moments per tensor, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update of every tensor of `set` named in `grads`.
    fn apply<'a>(
        &mut self,
        set: &mut NamedTensorSet,
        grads: impl IntoIterator<Item = (&'a str, &'a [f64])>,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let entry = set.get_mut(name).ok_or_else(|| {
                Error::ShapeMismatch(format!("no parameter `{name}` for gradient"))
            })?;
            let p = entry.tensor.data_mut();
            if p.len() != g.len() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for `{name}` has {} values, parameter has {}",
                    g.len(),
                    p.len()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.to_owned())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            if m.len() != g.len() {
                return Err(Error::ShapeMismatch(format!(
                    "moment shape changed for `{name}`"
                )));
            }
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let updated =
                    f64::from(p[i]) - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
                if !updated.is_finite() || updated.abs() > f64::from(f32::MAX) {
                    return Err(Error::NonFinite(format!("`{name}` after adam step")));
                }
                p[i] = updated as f32;
            }
        }
        Ok(())
    }
}

/// One Adam step over `params`. Every tensor in `grads` must exist in
/// `params` with the same shape; tensors without a gradient are copied.
pub fn adam_step(
    params: &NamedTensorSet,
    grads: &NamedTensorSet,
    mut adam: AdamState,
    cfg: &TrainConfig,
) -> Result<(NamedTensorSet, AdamState)> {
    for (name, g) in grads.iter() {
        match params.tensor(name) {
            Some(t) if t.shape() == g.tensor.shape() => {}
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "gradient `{name}` does not match a parameter"
                )))
            }
        }
    }
    let widened: Vec<(&str, Vec<f64>)> = grads
        .iter()
        .map(|(n, e)| (n, e.tensor.data().iter().map(|&v| f64::from(v)).collect()))
        .collect();
    let mut out = params.clone();
    adam.apply(
        &mut out,
        widened.iter().map(|(n, g)| (*n, g.as_slice())),
        cfg,
    )?;
    Ok((out, adam))
}

/// Mean loss and accuracy of the train-mode batches of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trains `state` in place for `epochs` passes over `data`. The shuffle
/// stream is `(cfg.seed, SHUFFLE)`; the final incomplete batch is kept.
pub(crate) fn run_epochs(
    state: &mut ModelState,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("`{}` has no samples", data.id)));
    }
    if data.dim != state.config().input_dim {
        return Err(Error::ShapeMismatch(format!(
            "dataset `{}` has {} features, model expects {}",
            data.id,
            data.dim,
            state.config().input_dim
        )));
    }
    if data.num_classes > state.config().num_classes {
        return Err(Error::ShapeMismatch(format!(
            "dataset `{}` has {} classes, model head has {}",
            data.id,
            data.num_classes,
            state.config().num_classes
        )));
    }
    let mut weights = class_weights(data);
    weights.resize(state.config().num_classes, 0.0);

    let mut rng = rng::stream(cfg.seed, rng::SHUFFLE);
    let mut adam = AdamState::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_dataset(data, chunk);
            let (logits, cache) = tinynet::forward_in_place(state, &batch, Mode::Train)?;
            let (loss, dlogits) =
                tinynet::weighted_cross_entropy(&logits, &batch.labels, &weights)?;
            loss_sum += loss * chunk.len() as f64;
            correct += logits
                .argmax_rows()
                .iter()
                .zip(&batch.labels)
                .filter(|(p, y)| p == y)
                .count();
            let grads = tinynet::backward_f64(state, &cache, &dlogits)?;
            step_state(&mut adam, state, &grads, cfg)?;
        }
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(history)
}

fn step_state(
    adam: &mut AdamState,
    state: &mut ModelState,
    grads: &BTreeMap<String, Vec<f64>>,
    cfg: &TrainConfig,
) -> Result<()> {
    adam.apply(
        state.tensors_mut(),
        grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())),
        cfg,
    )
}

/// Trains every parameter and head tensor of `state` without touching the
/// head initialization.
pub fn train(
    state: &ModelState,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelState, Vec<EpochRecord>)> {
    let mut next = state.clone();
    let history = run_epochs(&mut next, data, cfg, cfg.epochs)?;
    Ok((next, history))
}

/// Re-initializes the head from `cfg.seed` and trains for `cfg.epochs`.
pub fn fine_tune(base: &ModelState, data: &Dataset, cfg: &TrainConfig) -> Result<ModelState> {
    fine_tune_with_history(base, data, cfg).map(|(s, _)| s)
}

pub fn fine_tune_with_history(
    base: &ModelState,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelState, Vec<EpochRecord>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("`{}` has no samples", data.id)));
    }
    let mut state = base.clone();
    state.replace(&init_head(state.config(), cfg.seed))?;
    let history = run_epochs(&mut state, data, cfg, cfg.epochs)?;
    Ok((state, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluation data.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Unweighted mean cross-entropy.
    pub loss: f64,
}

const EVAL_CHUNK: usize = 1024;

/// Eval-mode accuracy and loss over `data`.
pub fn evaluate(state: &ModelState, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("`{}` has no samples", data.id)));
    }
    let classes = state.config().num_classes;
    let unit = vec![1.0; classes];
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = Batch::from_dataset(data, chunk);
        let out = tinynet::forward(state, &batch, Mode::Eval)?;
        let (loss, _) = tinynet::weighted_cross_entropy(&out.logits, &batch.labels, &unit)?;
        loss_sum += loss * chunk.len() as f64;
        for (p, &y) in out.logits.argmax_rows().into_iter().zip(&batch.labels) {
            totals[y] += 1;
            if p == y {
                hits[y] += 1;
            }
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(Metrics {
        accuracy: correct as f64 / data.len() as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        loss: loss_sum / data.len() as f64,
    })
}
