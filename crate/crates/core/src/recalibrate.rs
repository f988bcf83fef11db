//! Restoring batch-norm running statistics of a fused model.
//!
//! Two modes:
//!
//! * `stats` recomputes each running mean and variance as the exact population
//!   moments of the pre-normalization activations over all recalibration
//!   samples. Parameters and heads are left bit-identical.
//! * `epoch` runs one Adam pass over the shards, updating everything.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tinynet::{running_mean, running_var, Batch, Mode, ModelState, Weights};
use crate::trainer::{run_epochs, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecalibrationMode {
    #[default]
    Stats,
    Epoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecalibrationConfig {
    pub mode: RecalibrationMode,
    pub batch_size: usize,
    /// Stats mode: batches never mix samples from different shards.
    pub per_shard_batching: bool,
    /// Epoch mode: one pass per shard in turn instead of one pass over the
    /// union.
    pub sequential_shards: bool,
    /// Epoch mode optimizer settings; `epochs` is ignored (always one pass).
    pub train: TrainConfig,
}

impl Default for RecalibrationConfig {
    fn default() -> Self {
        Self {
            mode: RecalibrationMode::Stats,
            batch_size: 32,
            per_shard_batching: true,
            sequential_shards: false,
            train: TrainConfig::default(),
        }
    }
}

fn check_shards(shards: &[Dataset]) -> Result<()> {
    if shards.is_empty() || shards.iter().all(Dataset::is_empty) {
        return Err(Error::EmptyDataset("no recalibration samples".into()));
    }
    Ok(())
}

/// Dispatches on `cfg.mode`.
pub fn recalibrate(
    state: &ModelState,
    shards: &[Dataset],
    cfg: &RecalibrationConfig,
) -> Result<ModelState> {
    match cfg.mode {
        RecalibrationMode::Stats => recompute_bn_statistics(state, shards, cfg),
        RecalibrationMode::Epoch => recalibration_epoch(state, shards, cfg),
    }
}

/// Replaces every running mean/variance with `E[z]` and
/// `max(E[z^2] - E[z]^2, eps)` over all samples of all shards, where `z` is
/// the pre-normalization activation under train-mode propagation.
pub fn recompute_bn_statistics(
    state: &ModelState,
    shards: &[Dataset],
    cfg: &RecalibrationConfig,
) -> Result<ModelState> {
    check_shards(shards)?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let weights = Weights::from_state(state);
    let mut sums: Vec<(Vec<f64>, Vec<f64>)> = weights
        .blocks
        .iter()
        .map(|b| (vec![0.0; b.out_dim], vec![0.0; b.out_dim]))
        .collect();
    let mut count = 0usize;

    let mut stream = |data: &Dataset| -> Result<()> {
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(cfg.batch_size) {
            let batch = Batch::from_dataset(data, chunk);
            let (_, cache) = weights.forward(&batch, Mode::Train)?;
            for ((s1, s2), (b1, b2)) in sums.iter_mut().zip(cache.block_sums()) {
                s1.iter_mut().zip(&b1).for_each(|(a, b)| *a += b);
                s2.iter_mut().zip(&b2).for_each(|(a, b)| *a += b);
            }
            count += chunk.len();
        }
        Ok(())
    };
    if cfg.per_shard_batching {
        for shard in shards {
            stream(shard)?;
        }
    } else {
        stream(&Dataset::concat(shards, "recalibration")?)?;
    }

    let n = count as f64;
    let eps = state.config().bn_epsilon;
    let mut out = state.clone();
    for (k, (s1, s2)) in sums.iter().enumerate() {
        let mean: Vec<f64> = s1.iter().map(|s| s / n).collect();
        let var: Vec<f64> = s2
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(eps))
            .collect();
        out.set_values(&running_mean(k), mean);
        out.set_values(&running_var(k), var);
    }
    Ok(out)
}

/// One Adam pass over the shards (concatenated in the given order, then
/// shuffled with `cfg.train.seed`). The head is kept, not re-initialized.
pub fn recalibration_epoch(
    state: &ModelState,
    shards: &[Dataset],
    cfg: &RecalibrationConfig,
) -> Result<ModelState> {
    check_shards(shards)?;
    let mut out = state.clone();
    if cfg.sequential_shards {
        for shard in shards.iter().filter(|s| !s.is_empty()) {
            run_epochs(&mut out, shard, &cfg.train, 1)?;
        }
    } else {
        let union = Dataset::concat(shards, "recalibration")?;
        run_epochs(&mut out, &union, &cfg.train, 1)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, stratified_split, SyntheticSpec};
    use crate::tensor::Kind;
    use crate::tinynet::{forward, init_model, ModelConfig};
    use crate::trainer::fine_tune;

    fn setup() -> (ModelState, Dataset) {
        let spec = SyntheticSpec {
            dim: 5,
            samples_per_class: 10,
            seed: 2,
            ..Default::default()
        };
        let data = generate_blobs(&spec).unwrap();
        let state = init_model(&ModelConfig::new(5, 4).with_hidden(vec![6, 3]), 2).unwrap();
        (state, data)
    }

    #[test]
    fn single_batch_matches_batch_moments() {
        let (state, data) = setup();
        let cfg = RecalibrationConfig {
            batch_size: 64,
            ..Default::default()
        };
        let out = recompute_bn_statistics(&state, std::slice::from_ref(&data), &cfg).unwrap();
        let fwd = forward(&state, &Batch::whole(&data), Mode::Train).unwrap();
        for (k, (mean, var)) in fwd.cache.block_moments().enumerate() {
            let rm = out.tensors().tensor(&running_mean(k)).unwrap().data();
            let rv = out.tensors().tensor(&running_var(k)).unwrap().data();
            for j in 0..mean.len() {
                assert!((f64::from(rm[j]) - mean[j]).abs() < 1e-6);
                assert!((f64::from(rv[j]) - var[j].max(1e-5)).abs() < 1e-6 * var[j].max(1.0));
            }
        }
    }

    #[test]
    fn stats_mode_touches_only_buffers_and_is_idempotent() {
        let (state, data) = setup();
        let shards = stratified_split(&data, 4, 1).unwrap();
        let cfg = RecalibrationConfig::default();
        let once = recompute_bn_statistics(&state, &shards, &cfg).unwrap();
        assert_eq!(once.parameters(), state.parameters());
        assert_eq!(once.head(), state.head());
        let twice = recompute_bn_statistics(&once, &shards, &cfg).unwrap();
        assert_eq!(twice, once);
        for (name, e) in once.buffers().iter() {
            if name.ends_with("running_var") {
                assert!(e.tensor.data().iter().all(|&v| v >= 1e-5));
            }
            assert_eq!(e.kind, Kind::Buffer);
        }
    }

    #[test]
    fn empty_shards_are_rejected() {
        let (state, data) = setup();
        let cfg = RecalibrationConfig::default();
        assert!(matches!(
            recompute_bn_statistics(&state, &[], &cfg),
            Err(Error::EmptyDataset(_))
        ));
        let empty = data.subset(&[], "e");
        assert!(matches!(
            recalibration_epoch(&state, &[empty], &cfg),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn zero_learning_rate_epoch_moves_only_buffers() {
        let (state, data) = setup();
        let cfg = RecalibrationConfig {
            mode: RecalibrationMode::Epoch,
            train: TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            ..Default::default()
        };
        let out = recalibrate(&state, &[data], &cfg).unwrap();
        assert_eq!(out.parameters(), state.parameters());
        assert_eq!(out.head(), state.head());
        assert_ne!(out.buffers(), state.buffers());
    }

    #[test]
    fn single_shard_epoch_equals_one_epoch_fine_tune_without_head_reset() {
        let (state, data) = setup();
        let train = TrainConfig {
            epochs: 1,
            seed: 8,
            ..TrainConfig::default()
        };
        // Give the state the head fine_tune would draw, so the two paths start equal.
        let mut start = state.clone();
        start
            .replace(&crate::tinynet::init_head(state.config(), 8))
            .unwrap();
        let via_ft = fine_tune(&start, &data, &train).unwrap();
        let cfg = RecalibrationConfig {
            mode: RecalibrationMode::Epoch,
            train,
            ..Default::default()
        };
        let via_recal = recalibration_epoch(&start, &[data], &cfg).unwrap();
        assert_eq!(via_ft, via_recal);
    }
}
