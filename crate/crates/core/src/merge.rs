//! Data vectors and model fusion.
//!
//! A data vector is the parameter-only delta `finetuned - base` of one
//! independently fine-tuned model. Fusion scales the sum of the vectors,
//! adds it to the base, and averages the classification heads. Buffers never
//! enter a vector; fused models inherit the base's buffers until
//! recalibration.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{fingerprint, ContentHash, Metadata};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{combine, Entry, Kind, NamedTensorSet, Tensor};
use crate::tinynet::ModelState;

pub const BASE_HASH_KEY: &str = "base_hash";
pub const CONTENT_KEY: &str = "content";
pub const DATA_VECTOR_CONTENT: &str = "data_vector";

/// Parameter-only weight delta of a fine-tuned model against a base.
#[derive(Clone, Debug, PartialEq)]
pub struct DataVector {
    entries: NamedTensorSet,
    base_hash: ContentHash,
}

impl DataVector {
    /// Wraps parameter deltas. Rejects buffer and head entries.
    pub fn new(entries: NamedTensorSet, base_hash: ContentHash) -> Result<Self> {
        if let Some((name, e)) = entries.iter().find(|(_, e)| e.kind != Kind::Parameter) {
            return Err(Error::ShapeMismatch(format!(
                "data vectors hold parameters only; `{name}` is a {}",
                e.kind
            )));
        }
        Ok(Self { entries, base_hash })
    }

    pub fn entries(&self) -> &NamedTensorSet {
        &self.entries
    }

    pub fn base_hash(&self) -> ContentHash {
        self.base_hash
    }

    /// Hash of the vector's own contents; the canonical summation key.
    pub fn fingerprint(&self) -> ContentHash {
        fingerprint(&self.entries)
    }

    /// Checkpoint metadata recording the base this vector belongs to.
    pub fn metadata(&self) -> Metadata {
        let mut m = Metadata::new();
        m.insert(BASE_HASH_KEY.into(), self.base_hash.to_hex());
        m.insert(CONTENT_KEY.into(), DATA_VECTOR_CONTENT.into());
        m
    }

    pub fn from_checkpoint(entries: NamedTensorSet, metadata: &Metadata) -> Result<Self> {
        let hash = metadata
            .get(BASE_HASH_KEY)
            .ok_or_else(|| {
                Error::MissingBase(format!("checkpoint has no `{BASE_HASH_KEY}` metadata"))
            })?
            .parse()?;
        Self::new(entries, hash)
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, e)| e.tensor.l2_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPreset {
    /// Use `MergeConfig::lambda` as given.
    #[default]
    Fixed,
    /// `lambda = 1 / N` for `N` vectors.
    OneOverN,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub lambda: f64,
    pub lambda_preset: LambdaPreset,
    pub head_mode: HeadMode,
    pub random_seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            lambda_preset: LambdaPreset::Fixed,
            head_mode: HeadMode::Mean,
            random_seed: 3315,
        }
    }
}

impl MergeConfig {
    pub fn effective_lambda(&self, n: usize) -> f64 {
        match self.lambda_preset {
            LambdaPreset::Fixed => self.lambda,
            LambdaPreset::OneOverN => 1.0 / n as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::InvalidConfig("lambda must be finite".into()));
        }
        Ok(())
    }
}

/// `finetuned - base` over parameter tensors. Head and buffers are excluded.
pub fn compute_data_vector(
    finetuned: &ModelState,
    base: &ModelState,
    base_hash: ContentHash,
) -> Result<DataVector> {
    let base_params = base.parameters();
    if base_params.is_empty() {
        return Err(Error::MissingBase("base has no parameter tensors".into()));
    }
    let delta = combine(&finetuned.parameters(), &base_params, 1.0, -1.0)?;
    DataVector::new(delta, base_hash)
}

/// `lambda * sum(vectors)`, accumulated in f64 in ascending fingerprint order
/// and rounded once, so the result does not depend on input order.
pub fn sum_data_vectors(vectors: &[DataVector], lambda: f64) -> Result<DataVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::EmptyList("no data vectors to sum".into()))?;
    for v in &vectors[1..] {
        if v.base_hash != first.base_hash {
            return Err(Error::BaseMismatch {
                expected: first.base_hash.to_hex(),
                found: v.base_hash.to_hex(),
            });
        }
        first.entries.check_compatible(&v.entries)?;
    }
    let mut ordered: Vec<(ContentHash, &DataVector)> =
        vectors.iter().map(|v| (v.fingerprint(), v)).collect();
    ordered.sort_by_key(|a| a.0);

    let mut out = NamedTensorSet::new();
    for (name, entry) in first.entries.iter() {
        let mut acc = vec![0.0f64; entry.tensor.len()];
        for (_, v) in &ordered {
            let t = v.entries.tensor(name).expect("compatibility checked");
            for (a, &x) in acc.iter_mut().zip(t.data()) {
                *a += f64::from(x);
            }
        }
        let data: Vec<f32> = acc.iter().map(|a| (lambda * a) as f32).collect();
        out.insert(
            name,
            Tensor::new(entry.tensor.shape().to_vec(), data)?,
            Kind::Parameter,
        );
    }
    DataVector::new(out, first.base_hash)
}

/// Elementwise mean of several head sets.
pub fn mean_heads(heads: &[NamedTensorSet]) -> Result<NamedTensorSet> {
    mean_sets(heads)
}

fn mean_sets(sets: &[NamedTensorSet]) -> Result<NamedTensorSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::EmptyList("nothing to average".into()))?;
    for s in &sets[1..] {
        first.check_compatible(s)?;
    }
    let n = sets.len() as f64;
    first
        .iter()
        .map(|(name, entry)| {
            let mut acc = vec![0.0f64; entry.tensor.len()];
            for s in sets {
                for (a, &x) in acc
                    .iter_mut()
                    .zip(s.tensor(name).expect("compatible").data())
                {
                    *a += f64::from(x);
                }
            }
            let data = acc.iter().map(|a| (a / n) as f32).collect();
            let tensor = Tensor::new(entry.tensor.shape().to_vec(), data)?;
            Ok((
                name.to_owned(),
                Entry {
                    tensor,
                    kind: entry.kind,
                },
            ))
        })
        .collect()
}

/// Fused model: parameters `base + tau`, buffers copied from `base`, head the
/// mean of `heads` (the base head when `heads` is empty).
pub fn apply_data_vector(
    base: &ModelState,
    base_hash: ContentHash,
    tau: &DataVector,
    heads: &[NamedTensorSet],
) -> Result<ModelState> {
    if tau.base_hash != base_hash {
        return Err(Error::BaseMismatch {
            expected: base_hash.to_hex(),
            found: tau.base_hash.to_hex(),
        });
    }
    let params = combine(&base.parameters(), &tau.entries, 1.0, 1.0)?;
    let mut fused = base.clone();
    fused.replace(&params)?;
    if !heads.is_empty() {
        let head = mean_heads(heads)?;
        base.head().check_compatible(&head)?;
        fused.replace(&head)?;
    }
    Ok(fused)
}

/// Params-mean baseline: elementwise mean of every tensor (parameters,
/// buffers and heads alike).
pub fn merge_params_mean(states: &[ModelState]) -> Result<ModelState> {
    let first = states
        .first()
        .ok_or_else(|| Error::EmptyList("no models to average".into()))?;
    let sets: Vec<NamedTensorSet> = states.iter().map(|s| s.tensors().clone()).collect();
    let mean = mean_sets(&sets)?;
    ModelState::from_parts(first.config().clone(), mean)
}

/// Random-direction control: per layer, i.i.d. standard normal entries
/// rescaled to the reference layer's L2 norm. Zero-norm reference layers stay
/// zero.
pub fn random_vector_like(reference: &DataVector, seed: u64) -> DataVector {
    let mut rng = rng::stream(seed, rng::RANDOM_VECTOR);
    let mut out = NamedTensorSet::new();
    for (name, entry) in reference.entries.iter() {
        let target = entry.tensor.l2_norm();
        let draws: Vec<f64> = (0..entry.tensor.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let norm = draws.iter().map(|v| v * v).sum::<f64>().sqrt();
        let factor = if target == 0.0 || norm == 0.0 {
            0.0
        } else {
            target / norm
        };
        let data = draws.iter().map(|v| (v * factor) as f32).collect();
        let tensor =
            Tensor::new(entry.tensor.shape().to_vec(), data).expect("same shape as reference");
        out.insert(name, tensor, Kind::Parameter);
    }
    DataVector {
        entries: out,
        base_hash: reference.base_hash,
    }
}
