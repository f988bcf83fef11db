//! Batch-normalized multilayer perceptron with an attachable classification
//! head.
//!
//! Each hidden block is `affine -> batch norm -> ReLU`; the head is a final
//! affine layer. Storage lives in a [`NamedTensorSet`] (f32); all arithmetic
//! runs on an f64 mirror, [`Weights`].

use std::collections::BTreeMap;
use std::hash::Hasher;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Metadata;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Kind, NamedTensorSet, Tensor};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";
pub const BATCHES_SEEN: &str = "bn.batches_seen";
pub const ARCH_KEY: &str = "arch";

pub fn linear_weight(k: usize) -> String {
    format!("block{k}.linear.weight")
}
pub fn linear_bias(k: usize) -> String {
    format!("block{k}.linear.bias")
}
pub fn bn_gamma(k: usize) -> String {
    format!("block{k}.bn.gamma")
}
pub fn bn_beta(k: usize) -> String {
    format!("block{k}.bn.beta")
}
pub fn running_mean(k: usize) -> String {
    format!("block{k}.bn.running_mean")
}
pub fn running_var(k: usize) -> String {
    format!("block{k}.bn.running_var")
}

/// Network depth of a tensor name: block index, with head and unknown names
/// sorted after every block.
pub fn layer_depth(name: &str) -> usize {
    name.strip_prefix("block")
        .and_then(|rest| rest.split('.').next())
        .and_then(|k| k.parse().ok())
        .unwrap_or(usize::MAX)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "default_eps")]
    pub bn_epsilon: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 32]
}
fn default_eps() -> f64 {
    1e-5
}
fn default_momentum() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: default_hidden(),
            num_classes,
            bn_epsilon: default_eps(),
            bn_momentum: default_momentum(),
        }
    }

    pub fn with_hidden(mut self, hidden_dims: Vec<usize>) -> Self {
        self.hidden_dims = hidden_dims;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0)
        {
            return Err(Error::InvalidConfig(
                "all model dimensions must be >= 1".into(),
            ));
        }
        if self.bn_epsilon.is_nan() || self.bn_epsilon <= 0.0 {
            return Err(Error::InvalidConfig("bn_epsilon must be > 0".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::InvalidConfig("bn_momentum must be in (0, 1]".into()));
        }
        Ok(())
    }

    fn block_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let ins = std::iter::once(self.input_dim).chain(self.hidden_dims.iter().copied());
        ins.zip(self.hidden_dims.iter().copied())
    }

    fn last_hidden(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    /// Expected `(name, kind, shape)` of every tensor in a state.
    pub fn layout(&self) -> Vec<(String, Kind, Vec<usize>)> {
        let mut out = Vec::new();
        for (k, (fan_in, fan_out)) in self.block_dims().enumerate() {
            out.push((linear_weight(k), Kind::Parameter, vec![fan_out, fan_in]));
            out.push((linear_bias(k), Kind::Parameter, vec![fan_out]));
            out.push((bn_gamma(k), Kind::Parameter, vec![fan_out]));
            out.push((bn_beta(k), Kind::Parameter, vec![fan_out]));
            out.push((running_mean(k), Kind::Buffer, vec![fan_out]));
            out.push((running_var(k), Kind::Buffer, vec![fan_out]));
        }
        out.push((
            HEAD_WEIGHT.into(),
            Kind::Head,
            vec![self.num_classes, self.last_hidden()],
        ));
        out.push((HEAD_BIAS.into(), Kind::Head, vec![self.num_classes]));
        out.push((BATCHES_SEEN.into(), Kind::Buffer, vec![1]));
        out
    }

    /// Recovers dimensions from tensor shapes; BN hyperparameters take defaults.
    pub fn infer(set: &NamedTensorSet) -> Result<Self> {
        let missing = |n: &str| Error::ShapeMismatch(format!("state has no `{n}`"));
        let first = set.tensor(&linear_weight(0));
        let input_dim = match first {
            Some(t) if t.shape().len() == 2 => t.shape()[1],
            Some(_) => return Err(Error::ShapeMismatch("linear weights must be 2-D".into())),
            None => set
                .tensor(HEAD_WEIGHT)
                .and_then(|t| t.shape().get(1).copied())
                .ok_or_else(|| missing(HEAD_WEIGHT))?,
        };
        let mut hidden_dims = Vec::new();
        while let Some(t) = set.tensor(&linear_weight(hidden_dims.len())) {
            hidden_dims.push(t.shape()[0]);
        }
        let num_classes = set
            .tensor(HEAD_WEIGHT)
            .ok_or_else(|| missing(HEAD_WEIGHT))?
            .shape()[0];
        Ok(Self {
            input_dim,
            hidden_dims,
            num_classes,
            bn_epsilon: default_eps(),
            bn_momentum: default_momentum(),
        })
    }
}

/// A full model: configuration plus parameters, buffers and head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    tensors: NamedTensorSet,
}

impl ModelState {
    /// Wraps a tensor set, checking it matches the configured layout exactly.
    pub fn from_parts(config: ModelConfig, tensors: NamedTensorSet) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "state has {} tensors, architecture needs {}",
                tensors.len(),
                layout.len()
            )));
        }
        for (name, kind, shape) in &layout {
            let entry = tensors
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("state has no `{name}`")))?;
            if entry.kind != *kind || entry.tensor.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}` is {} {:?}, expected {kind} {shape:?}",
                    entry.kind,
                    entry.tensor.shape()
                )));
            }
        }
        for k in 0..config.hidden_dims.len() {
            if tensors
                .tensor(&running_var(k))
                .unwrap()
                .data()
                .iter()
                .any(|&v| v <= 0.0)
            {
                return Err(Error::InvalidConfig(format!(
                    "`{}` must be positive",
                    running_var(k)
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    /// Builds a state from checkpoint contents, using the `arch` metadata key
    /// when present.
    pub fn from_checkpoint(tensors: NamedTensorSet, metadata: &Metadata) -> Result<Self> {
        let config = match metadata.get(ARCH_KEY) {
            Some(arch) => serde_json::from_str(arch)
                .map_err(|e| Error::CorruptFile(format!("bad `{ARCH_KEY}` metadata: {e}")))?,
            None => ModelConfig::infer(&tensors)?,
        };
        Self::from_parts(config, tensors)
    }

    /// Metadata that lets [`ModelState::from_checkpoint`] restore the config.
    pub fn metadata(&self) -> Metadata {
        let mut m = Metadata::new();
        m.insert(
            ARCH_KEY.into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        m
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &NamedTensorSet {
        &self.tensors
    }

    pub fn into_tensors(self) -> NamedTensorSet {
        self.tensors
    }

    pub fn kind_set(&self, kind: Kind) -> NamedTensorSet {
        self.tensors.filter_kind(kind)
    }

    pub fn parameters(&self) -> NamedTensorSet {
        self.kind_set(Kind::Parameter)
    }

    pub fn head(&self) -> NamedTensorSet {
        self.kind_set(Kind::Head)
    }

    pub fn buffers(&self) -> NamedTensorSet {
        self.kind_set(Kind::Buffer)
    }

    /// Replaces every tensor of `replacement` (names must exist with the same
    /// kind and shape).
    pub fn replace(&mut self, replacement: &NamedTensorSet) -> Result<()> {
        for (name, entry) in replacement.iter() {
            let slot = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("state has no `{name}`")))?;
            if slot.kind != entry.kind || slot.tensor.shape() != entry.tensor.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}` differs in kind or shape"
                )));
            }
            slot.tensor = entry.tensor.clone();
        }
        Ok(())
    }

    /// In-place value access; callers must preserve names, kinds and shapes.
    pub(crate) fn tensors_mut(&mut self) -> &mut NamedTensorSet {
        &mut self.tensors
    }

    pub(crate) fn set_values(&mut self, name: &str, values: impl IntoIterator<Item = f64>) {
        let slot = self.tensors.get_mut(name).expect("layout-checked name");
        for (dst, v) in slot.tensor.data_mut().iter_mut().zip(values) {
            *dst = v as f32;
        }
    }

    /// Fingerprint of parameter and head values; used to detect stale caches.
    fn trainable_fingerprint(&self) -> u64 {
        let mut h = Fnv64::default();
        for (name, entry) in self.tensors.iter() {
            if entry.kind != Kind::Buffer {
                h.write(name.as_bytes());
                for v in entry.tensor.data() {
                    h.write_u32(v.to_bits());
                }
            }
        }
        h.finish()
    }
}

struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv64 {
    fn finish(&self) -> u64 {
        self.0
    }
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect();
    Tensor::new(vec![fan_out, fan_in], data).expect("glorot shape")
}

/// Fresh head drawn from the `HEAD` stream of `seed`.
pub fn init_head(config: &ModelConfig, seed: u64) -> NamedTensorSet {
    let mut rng = rng::stream(seed, rng::HEAD);
    let mut head = NamedTensorSet::new();
    head.insert(
        HEAD_WEIGHT,
        glorot(&mut rng, config.last_hidden(), config.num_classes),
        Kind::Head,
    );
    head.insert(
        HEAD_BIAS,
        Tensor::zeros(vec![config.num_classes]),
        Kind::Head,
    );
    head
}

/// Glorot-uniform weights (`U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`),
/// zero biases, identity batch norm (`gamma = 1`, `beta = 0`, running mean 0,
/// running variance 1).
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = rng::stream(seed, rng::INIT);
    let mut t = NamedTensorSet::new();
    for (k, (fan_in, fan_out)) in config.block_dims().enumerate() {
        t.insert(
            linear_weight(k),
            glorot(&mut rng, fan_in, fan_out),
            Kind::Parameter,
        );
        t.insert(
            linear_bias(k),
            Tensor::zeros(vec![fan_out]),
            Kind::Parameter,
        );
        t.insert(
            bn_gamma(k),
            Tensor::filled(vec![fan_out], 1.0),
            Kind::Parameter,
        );
        t.insert(bn_beta(k), Tensor::zeros(vec![fan_out]), Kind::Parameter);
        t.insert(running_mean(k), Tensor::zeros(vec![fan_out]), Kind::Buffer);
        t.insert(
            running_var(k),
            Tensor::filled(vec![fan_out], 1.0),
            Kind::Buffer,
        );
    }
    for (name, entry) in init_head(config, seed).iter() {
        t.insert(name, entry.tensor.clone(), Kind::Head);
    }
    t.insert(BATCHES_SEEN, Tensor::zeros(vec![1]), Kind::Buffer);
    ModelState::from_parts(config.clone(), t)
}

/// Row-major f64 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Index of the largest entry of each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let r = self.row(i);
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Samples and labels fed through the network together.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Vec<f32>,
    pub dim: usize,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<f32>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset("batch has no samples".into()));
        }
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch features".into()));
        }
        Ok(Self {
            features,
            dim,
            labels,
        })
    }

    pub fn from_dataset(data: &Dataset, indices: &[usize]) -> Self {
        let sub = data.subset(indices, "");
        Self {
            features: sub.features,
            dim: sub.dim,
            labels: sub.labels,
        }
    }

    pub fn whole(data: &Dataset) -> Self {
        Self {
            features: data.features.clone(),
            dim: data.dim,
            labels: data.labels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// f64 mirror of a [`ModelState`], the form every kernel operates on.
#[derive(Clone, Debug)]
pub struct Weights {
    pub blocks: Vec<BlockWeights>,
    /// `num_classes x last_hidden`, row-major.
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
    pub num_classes: usize,
    pub input_dim: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

impl Weights {
    pub fn from_state(state: &ModelState) -> Self {
        let t = &state.tensors;
        let get = |n: &str| widen(t.tensor(n).expect("layout-checked name"));
        let cfg = &state.config;
        let blocks = cfg
            .block_dims()
            .enumerate()
            .map(|(k, (in_dim, out_dim))| BlockWeights {
                in_dim,
                out_dim,
                weight: get(&linear_weight(k)),
                bias: get(&linear_bias(k)),
                gamma: get(&bn_gamma(k)),
                beta: get(&bn_beta(k)),
                running_mean: get(&running_mean(k)),
                running_var: get(&running_var(k)),
            })
            .collect();
        Self {
            blocks,
            head_weight: get(HEAD_WEIGHT),
            head_bias: get(HEAD_BIAS),
            num_classes: cfg.num_classes,
            input_dim: cfg.input_dim,
            bn_epsilon: cfg.bn_epsilon,
            bn_momentum: cfg.bn_momentum,
        }
    }

    /// Mutable access to a parameter or head tensor by its state name.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        match name {
            HEAD_WEIGHT => return Some(&mut self.head_weight),
            HEAD_BIAS => return Some(&mut self.head_bias),
            _ => {}
        }
        let k = layer_depth(name);
        let block = self.blocks.get_mut(k)?;
        let field = name.split_once('.')?.1;
        match field {
            "linear.weight" => Some(&mut block.weight),
            "linear.bias" => Some(&mut block.bias),
            "bn.gamma" => Some(&mut block.gamma),
            "bn.beta" => Some(&mut block.beta),
            _ => None,
        }
    }

    /// Names of every trainable (parameter or head) tensor.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.blocks.len())
            .flat_map(|k| [linear_weight(k), linear_bias(k), bn_gamma(k), bn_beta(k)])
            .collect();
        names.push(HEAD_WEIGHT.into());
        names.push(HEAD_BIAS.into());
        names
    }

    /// Forward pass. In train mode the returned `BatchStats` hold per-block
    /// batch mean and biased variance of the pre-normalization activations.
    pub fn forward(&self, batch: &Batch, mode: Mode) -> Result<(Matrix, Cache)> {
        if batch.dim != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} features, model expects {}",
                batch.dim, self.input_dim
            )));
        }
        let n = batch.len();
        let mut x: Vec<f64> = batch.features.iter().map(|&v| f64::from(v)).collect();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let z = affine(&x, n, b.in_dim, &b.weight, &b.bias, b.out_dim);
            let (mean, var) = match mode {
                Mode::Train => column_moments(&z, n, b.out_dim),
                Mode::Eval => (b.running_mean.clone(), b.running_var.clone()),
            };
            let inv_std: Vec<f64> = var
                .iter()
                .map(|v| 1.0 / (v + self.bn_epsilon).sqrt())
                .collect();
            let mut xhat = vec![0.0; n * b.out_dim];
            let mut y = vec![0.0; n * b.out_dim];
            let mut a = vec![0.0; n * b.out_dim];
            for i in 0..n {
                for j in 0..b.out_dim {
                    let idx = i * b.out_dim + j;
                    let h = (z[idx] - mean[j]) * inv_std[j];
                    xhat[idx] = h;
                    y[idx] = b.gamma[j] * h + b.beta[j];
                    a[idx] = y[idx].max(0.0);
                }
            }
            blocks.push(BlockCache {
                input: std::mem::replace(&mut x, a),
                pre_norm: z,
                xhat,
                pre_relu: y,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            });
        }
        let last = self.blocks.last().map_or(self.input_dim, |b| b.out_dim);
        let logits = affine(
            &x,
            n,
            last,
            &self.head_weight,
            &self.head_bias,
            self.num_classes,
        );
        Ok((
            Matrix {
                rows: n,
                cols: self.num_classes,
                data: logits,
            },
            Cache {
                mode,
                rows: n,
                blocks,
                hidden: x,
                fingerprint: None,
            },
        ))
    }

    /// Gradients of every trainable tensor, keyed by state name.
    pub fn backward(&self, cache: &Cache, dlogits: &Matrix) -> Result<BTreeMap<String, Vec<f64>>> {
        if cache.mode != Mode::Train {
            return Err(Error::StaleCache(
                "backward needs a train-mode forward cache".into(),
            ));
        }
        let n = cache.rows;
        if dlogits.rows != n || dlogits.cols != self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "dlogits is {}x{}, expected {n}x{}",
                dlogits.rows, dlogits.cols, self.num_classes
            )));
        }
        let mut grads = BTreeMap::new();
        let last = self.blocks.last().map_or(self.input_dim, |b| b.out_dim);
        let (dw, db, mut da) = affine_backward(
            &cache.hidden,
            n,
            last,
            &self.head_weight,
            self.num_classes,
            &dlogits.data,
        );
        grads.insert(HEAD_WEIGHT.to_string(), dw);
        grads.insert(HEAD_BIAS.to_string(), db);

        for (k, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let m = b.out_dim;
            let mut dgamma = vec![0.0; m];
            let mut dbeta = vec![0.0; m];
            let mut dxhat = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    let idx = i * m + j;
                    let dy = if c.pre_relu[idx] > 0.0 { da[idx] } else { 0.0 };
                    dgamma[j] += dy * c.xhat[idx];
                    dbeta[j] += dy;
                    dxhat[idx] = dy * b.gamma[j];
                }
            }
            // Batch statistics depend on every sample in the batch.
            let mut sum_dxhat = vec![0.0; m];
            let mut sum_dxhat_xhat = vec![0.0; m];
            for i in 0..n {
                for j in 0..m {
                    let idx = i * m + j;
                    sum_dxhat[j] += dxhat[idx];
                    sum_dxhat_xhat[j] += dxhat[idx] * c.xhat[idx];
                }
            }
            let nf = n as f64;
            let mut dz = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    let idx = i * m + j;
                    dz[idx] = c.inv_std[j] / nf
                        * (nf * dxhat[idx] - sum_dxhat[j] - c.xhat[idx] * sum_dxhat_xhat[j]);
                }
            }
            let (dw, db, dx) = affine_backward(&c.input, n, b.in_dim, &b.weight, m, &dz);
            grads.insert(linear_weight(k), dw);
            grads.insert(linear_bias(k), db);
            grads.insert(bn_gamma(k), dgamma);
            grads.insert(bn_beta(k), dbeta);
            da = dx;
        }
        Ok(grads)
    }
}

#[derive(Clone, Debug)]
struct BlockCache {
    input: Vec<f64>,
    pre_norm: Vec<f64>,
    xhat: Vec<f64>,
    pre_relu: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Intermediates retained by a forward pass for [`backward`].
#[derive(Clone, Debug)]
pub struct Cache {
    mode: Mode,
    rows: usize,
    blocks: Vec<BlockCache>,
    hidden: Vec<f64>,
    fingerprint: Option<u64>,
}

impl Cache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Per-block batch mean and biased variance of the pre-normalization
    /// activations (running statistics in eval mode).
    pub fn block_moments(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.blocks
            .iter()
            .map(|b| (b.batch_mean.as_slice(), b.batch_var.as_slice()))
    }

    /// Per-block column sums of the pre-normalization activations and of
    /// their squares.
    pub(crate) fn block_sums(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.blocks
            .iter()
            .map(|b| {
                let m = b.inv_std.len();
                let mut s1 = vec![0.0; m];
                let mut s2 = vec![0.0; m];
                for row in b.pre_norm.chunks_exact(m) {
                    for (j, &z) in row.iter().enumerate() {
                        s1[j] += z;
                        s2[j] += z * z;
                    }
                }
                (s1, s2)
            })
            .collect()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// `out = x W^T + b`, `x` is `n x in_dim`, `W` is `out_dim x in_dim`.
fn affine(x: &[f64], n: usize, in_dim: usize, w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * out_dim];
    for i in 0..n {
        let xi = &x[i * in_dim..(i + 1) * in_dim];
        for j in 0..out_dim {
            let wj = &w[j * in_dim..(j + 1) * in_dim];
            out[i * out_dim + j] = b[j] + xi.iter().zip(wj).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

/// Returns `(dW, db, dx)` for [`affine`].
fn affine_backward(
    x: &[f64],
    n: usize,
    in_dim: usize,
    w: &[f64],
    out_dim: usize,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0; out_dim * in_dim];
    let mut db = vec![0.0; out_dim];
    let mut dx = vec![0.0; n * in_dim];
    for i in 0..n {
        let xi = &x[i * in_dim..(i + 1) * in_dim];
        let dxi = &mut dx[i * in_dim..(i + 1) * in_dim];
        for j in 0..out_dim {
            let g = dout[i * out_dim + j];
            if g == 0.0 {
                continue;
            }
            db[j] += g;
            let wj = &w[j * in_dim..(j + 1) * in_dim];
            let dwj = &mut dw[j * in_dim..(j + 1) * in_dim];
            for t in 0..in_dim {
                dwj[t] += g * xi[t];
                dxi[t] += g * wj[t];
            }
        }
    }
    (dw, db, dx)
}

/// Per-column mean and biased variance.
fn column_moments(z: &[f64], n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let nf = n as f64;
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            mean[j] += z[i * m + j];
        }
    }
    mean.iter_mut().for_each(|v| *v /= nf);
    let mut var = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let d = z[i * m + j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= nf);
    (mean, var)
}

/// Result of [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub cache: Cache,
    /// Input state with running statistics updated (train mode) or unchanged.
    pub state: ModelState,
}

/// Forward pass over a state. Train mode normalizes with batch statistics and
/// folds them into the running buffers
/// (`running <- (1 - m) running + m batch`, unbiased variance); eval mode uses
/// the running buffers and leaves the state untouched.
pub fn forward(state: &ModelState, batch: &Batch, mode: Mode) -> Result<ForwardOutput> {
    let mut next = state.clone();
    let (logits, cache) = forward_in_place(&mut next, batch, mode)?;
    Ok(ForwardOutput {
        logits,
        cache,
        state: next,
    })
}

pub(crate) fn forward_in_place(
    state: &mut ModelState,
    batch: &Batch,
    mode: Mode,
) -> Result<(Matrix, Cache)> {
    let weights = Weights::from_state(state);
    let (logits, mut cache) = weights.forward(batch, mode)?;
    cache.fingerprint = Some(state.trainable_fingerprint());
    if mode == Mode::Train {
        let m = weights.bn_momentum;
        let n = batch.len() as f64;
        let correction = if batch.len() > 1 { n / (n - 1.0) } else { 1.0 };
        for (k, (b, c)) in weights.blocks.iter().zip(&cache.blocks).enumerate() {
            let mean = b
                .running_mean
                .iter()
                .zip(&c.batch_mean)
                .map(|(r, s)| (1.0 - m) * r + m * s);
            let var = b.running_var.iter().zip(&c.batch_var).map(|(r, s)| {
                ((1.0 - m) * r + m * s * correction).max(f64::from(f32::MIN_POSITIVE))
            });
            state.set_values(&running_mean(k), mean);
            state.set_values(&running_var(k), var);
        }
        let seen = state.tensors.tensor(BATCHES_SEEN).unwrap().data()[0];
        state.set_values(BATCHES_SEEN, [f64::from(seen) + 1.0]);
    }
    Ok((logits, cache))
}

/// Gradients for every parameter and head tensor of `state`, as a set with
/// the same names, kinds and shapes. Buffers get no gradient.
pub fn backward(state: &ModelState, cache: &Cache, dlogits: &Matrix) -> Result<NamedTensorSet> {
    let grads = backward_f64(state, cache, dlogits)?;
    let mut out = NamedTensorSet::new();
    for (name, entry) in state.tensors.iter() {
        if entry.kind == Kind::Buffer {
            continue;
        }
        let g = &grads[name];
        let tensor = Tensor::new(
            entry.tensor.shape().to_vec(),
            g.iter().map(|&v| v as f32).collect(),
        )?;
        out.insert(name, tensor, entry.kind);
    }
    Ok(out)
}

pub(crate) fn backward_f64(
    state: &ModelState,
    cache: &Cache,
    dlogits: &Matrix,
) -> Result<BTreeMap<String, Vec<f64>>> {
    match cache.fingerprint {
        Some(fp) if fp == state.trainable_fingerprint() => {}
        _ => {
            return Err(Error::StaleCache(
                "cache was produced from different parameters".into(),
            ))
        }
    }
    Weights::from_state(state).backward(cache, dlogits)
}

/// Row softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Class-weighted cross-entropy, normalized by the total weight of the batch:
/// `loss = sum_b w[y_b] * -log softmax(z_b)[y_b] / sum_b w[y_b]`.
///
/// Returns the loss and its gradient with respect to the logits. A batch
/// whose total weight is zero has loss 0 and zero gradient.
pub fn weighted_cross_entropy(
    logits: &Matrix,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows
        )));
    }
    if class_weights.len() != logits.cols {
        return Err(Error::ShapeMismatch(format!(
            "{} class weights for {} classes",
            class_weights.len(),
            logits.cols
        )));
    }
    if class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidConfig(
            "class weights must be finite and non-negative".into(),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= logits.cols) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: logits.cols,
        });
    }
    let total: f64 = labels.iter().map(|&y| class_weights[y]).sum();
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    if total == 0.0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        let w = class_weights[y] / total;
        loss += w * -(row[y] - max - log_sum);
        let g = grad.row_mut(i);
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - max - log_sum).exp();
            *gj = w * (p - if j == y { 1.0 } else { 0.0 });
        }
    }
    Ok((loss, grad))
}
