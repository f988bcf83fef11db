//! Layer-wise cosine diagnostics and the end-to-end experiment runner.
//!
//! One experiment seed runs the whole pipeline: pretrain a base on a shifted
//! distribution, split the target training data into shards, fine-tune one
//! model per shard, fuse them three ways (params mean, data vector, random
//! vector), recalibrate each fusion, fine-tune a full-data reference, and
//! evaluate everything on one held-out test set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, encode, write_checkpoint, ContentHash, Metadata};
use crate::data::{self, generate_blobs, stratified_holdout, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::merge::{
    self, apply_data_vector, compute_data_vector, merge_params_mean, random_vector_like,
    sum_data_vectors, DataVector, MergeConfig,
};
use crate::recalibrate::{recalibrate, RecalibrationConfig};
use crate::tensor::{cosine, Kind, LayerCosine};
use crate::tinynet::{init_model, layer_depth, ModelConfig, ModelState};
use crate::trainer::{evaluate, fine_tune, train, TrainConfig};

pub const SEED_KEY: &str = "seed";
pub const DATASET_KEY: &str = "dataset";

/// Checkpoint metadata of a trained model; shared by the experiment runner and
/// the CLI so both produce identical files.
pub fn model_metadata(state: &ModelState, seed: u64, dataset_id: Option<&str>) -> Metadata {
    let mut m = state.metadata();
    m.insert(SEED_KEY.into(), seed.to_string());
    if let Some(id) = dataset_id {
        m.insert(DATASET_KEY.into(), id.to_owned());
    }
    m
}

/// Content hash a model would have if written with `metadata`.
pub fn state_hash(state: &ModelState, metadata: &Metadata) -> ContentHash {
    ContentHash::of_bytes(&encode(state.tensors(), metadata))
}

/// Which parameter layers enter the cosine report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    /// Affine weight matrices only.
    #[default]
    LinearWeights,
    /// Every parameter-kind tensor.
    AllParameters,
}

impl LayerSelection {
    fn keeps(self, name: &str) -> bool {
        match self {
            LayerSelection::LinearWeights => name.ends_with(".linear.weight"),
            LayerSelection::AllParameters => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub layer: String,
    pub depth: usize,
    pub candidate: String,
    pub cosine: f64,
    pub zero_norm: bool,
}

/// Per-layer cosine between each candidate's delta from `base` and the
/// full-training delta from `base`. Rows are grouped by candidate, layers in
/// network depth order.
pub fn cosine_report(
    base: &ModelState,
    full: &ModelState,
    candidates: &[ModelState],
    labels: &[String],
    selection: LayerSelection,
) -> Result<Vec<CosineRow>> {
    if candidates.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} candidates but {} labels",
            candidates.len(),
            labels.len()
        )));
    }
    let base_params = base.parameters();
    let tau_full = crate::tensor::combine(&full.parameters(), &base_params, 1.0, -1.0)?;
    let mut layers: Vec<&str> = tau_full.names().filter(|n| selection.keeps(n)).collect();
    layers.sort_by_key(|n| (layer_depth(n), *n));

    let mut rows = Vec::new();
    for (candidate, label) in candidates.iter().zip(labels) {
        let tau = crate::tensor::combine(&candidate.parameters(), &base_params, 1.0, -1.0)?;
        for &layer in &layers {
            let LayerCosine { cosine, zero_norm } = cosine(
                tau.tensor(layer).expect("compatible").data(),
                tau_full.tensor(layer).expect("compatible").data(),
            );
            rows.push(CosineRow {
                layer: layer.to_owned(),
                depth: layer_depth(layer),
                candidate: label.clone(),
                cosine,
                zero_norm,
            });
        }
    }
    Ok(rows)
}

/// Median cosine across the layers of one candidate.
pub fn median_cosine(rows: &[CosineRow], candidate: &str) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.candidate == candidate)
        .map(|r| r.cosine)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Architecture settings besides the data-determined input/output sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub hidden_dims: Vec<usize>,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ModelConfig::new(1, 1);
        Self {
            hidden_dims: d.hidden_dims,
            bn_epsilon: d.bn_epsilon,
            bn_momentum: d.bn_momentum,
        }
    }
}

impl ModelSettings {
    pub fn config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            num_classes,
            bn_epsilon: self.bn_epsilon,
            bn_momentum: self.bn_momentum,
        }
    }
}

/// Synthetic benchmark data. Both specs take each experiment seed as their
/// generator seed; the pretraining spec adds its domain shift and its own
/// sample stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub target: SyntheticSpec,
    pub pretrain: SyntheticSpec,
}

impl Default for SyntheticData {
    fn default() -> Self {
        let target = SyntheticSpec {
            samples_per_class: 375,
            sigma: BENCHMARK_SIGMA,
            ..SyntheticSpec::default()
        };
        let pretrain = SyntheticSpec {
            samples_per_class: 250,
            domain_shift: BENCHMARK_DOMAIN_SHIFT,
            sample_stream: 1,
            ..target.clone()
        };
        Self { target, pretrain }
    }
}

/// Noise level of the frozen benchmark, fixed by the sweep in
/// `examples/sigma_sweep.rs`.
pub const BENCHMARK_SIGMA: f64 = 2.0;
pub const BENCHMARK_DOMAIN_SHIFT: f64 = 2.0;

/// Experiment inputs read from disk instead of generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub pretrain: PathBuf,
    /// Target data; split into train/test by `test_fraction`.
    pub target: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticData,
    /// When set, replaces the synthetic data.
    pub paths: Option<DatasetPaths>,
    pub parts: usize,
    pub test_fraction: f64,
    pub stratified: bool,
    pub model: ModelSettings,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub merge: MergeConfig,
    pub recalibration: RecalibrationConfig,
    pub cosine_layers: LayerSelection,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    /// Worker threads for per-seed pipelines; 0 means one per seed.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticData::default(),
            paths: None,
            parts: 4,
            test_fraction: 1.0 / 3.0,
            stratified: true,
            model: ModelSettings::default(),
            pretrain: TrainConfig {
                epochs: 16,
                ..TrainConfig::default()
            },
            train: TrainConfig::default(),
            merge: MergeConfig {
                lambda: BENCHMARK_LAMBDA,
                ..MergeConfig::default()
            },
            recalibration: RecalibrationConfig::default(),
            cosine_layers: LayerSelection::default(),
            seeds: vec![3315, 3316, 3317, 3318, 3319],
            output_dir: None,
            workers: 0,
        }
    }
}

/// Coefficient of the frozen benchmark.
pub const BENCHMARK_LAMBDA: f64 = 0.25;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("experiment config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts == 0 {
            return Err(Error::InvalidConfig("parts must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::IncompleteReport("no seeds configured".into()));
        }
        self.train.validate()?;
        self.pretrain.validate()?;
        self.merge.validate()?;
        if self.paths.is_none() {
            self.synthetic.target.validate()?;
            self.synthetic.pretrain.validate()?;
        }
        Ok(())
    }

    /// Copy of every seeded sub-config with `seed` substituted.
    pub fn for_seed(&self, seed: u64) -> SeedPlan {
        let mut target = self.synthetic.target.clone();
        target.seed = seed;
        let mut pretrain_data = self.synthetic.pretrain.clone();
        pretrain_data.seed = seed;
        let mut pretrain = self.pretrain.clone();
        pretrain.seed = seed;
        let mut train = self.train.clone();
        train.seed = seed;
        let mut merge = self.merge.clone();
        merge.random_seed = seed;
        let mut recalibration = self.recalibration.clone();
        recalibration.train.seed = seed;
        SeedPlan {
            seed,
            target,
            pretrain_data,
            pretrain,
            train,
            merge,
            recalibration,
        }
    }
}

/// Per-seed view of an [`ExperimentConfig`].
#[derive(Clone, Debug)]
pub struct SeedPlan {
    pub seed: u64,
    pub target: SyntheticSpec,
    pub pretrain_data: SyntheticSpec,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub merge: MergeConfig,
    pub recalibration: RecalibrationConfig,
}

/// Datasets of one seed, with ids equal to the file stems the CLI uses.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub pretrain: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<Dataset>,
}

pub fn prepare_data(cfg: &ExperimentConfig, plan: &SeedPlan) -> Result<PreparedData> {
    let (pretrain, target) = match &cfg.paths {
        Some(p) => (
            data::load_csv(&p.pretrain, None)?,
            data::load_csv(&p.target, None)?,
        ),
        None => (
            generate_blobs(&plan.pretrain_data)?,
            generate_blobs(&plan.target)?,
        ),
    };
    let (train, test) = stratified_holdout(&target, cfg.test_fraction, plan.seed)?;
    let shards = data::split(&train, cfg.parts, plan.seed, cfg.stratified)?;
    Ok(PreparedData {
        pretrain: pretrain.with_id("pretrain"),
        train,
        test,
        shards,
    })
}

/// Accuracies and diagnostics of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub lambda: f64,
    /// One per shard ("Base Model" column).
    pub shard_accuracy: Vec<f64>,
    pub params_mean: f64,
    pub data_vector: f64,
    pub random_vector: f64,
    pub full_training: f64,
    /// Fused models evaluated before recalibration.
    pub params_mean_before_recalibration: f64,
    pub data_vector_before_recalibration: f64,
    pub random_vector_before_recalibration: f64,
    /// Whether recalibration left every parameter and head tensor of the
    /// data-vector fusion bit-identical.
    pub recalibration_preserved_parameters: bool,
    pub pretrained_accuracy: f64,
    pub cosine: Vec<CosineRow>,
    pub checkpoints: BTreeMap<String, String>,
}

impl SeedReport {
    pub fn mean_shard_accuracy(&self) -> f64 {
        self.shard_accuracy.iter().sum::<f64>() / self.shard_accuracy.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedReport>,
    #[serde(default)]
    pub failures: Vec<SeedFailure>,
    pub runtime_secs: f64,
}

impl ExperimentReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::IncompleteReport(format!("{}: {e}", path.display())))
    }
}

pub const CANDIDATE_DATA_VECTOR: &str = "data_vector";

pub fn shard_label(i: usize) -> String {
    format!("part_{i}")
}

struct CheckpointSink<'a> {
    dir: Option<PathBuf>,
    hashes: &'a mut BTreeMap<String, String>,
}

impl CheckpointSink<'_> {
    fn put(
        &mut self,
        name: &str,
        set: &crate::tensor::NamedTensorSet,
        meta: &Metadata,
    ) -> Result<ContentHash> {
        let hash = match &self.dir {
            Some(dir) => write_checkpoint(
                set,
                meta,
                dir.join(format!("{name}.{}", checkpoint::EXTENSION)),
            )?,
            None => ContentHash::of_bytes(&encode(set, meta)),
        };
        self.hashes.insert(name.to_owned(), hash.to_hex());
        Ok(hash)
    }

    fn model(&mut self, name: &str, state: &ModelState, meta: &Metadata) -> Result<ContentHash> {
        self.put(name, state.tensors(), meta)
    }

    fn vector(&mut self, name: &str, v: &DataVector) -> Result<ContentHash> {
        self.put(name, v.entries(), &v.metadata())
    }
}

/// Runs the full pipeline for one seed. When `dir` is given, every model and
/// vector is written there as a checkpoint.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: Option<&Path>) -> Result<SeedReport> {
    let plan = cfg.for_seed(seed);
    let data = prepare_data(cfg, &plan)?;
    if let Some(dir) = dir {
        let data_dir = dir.join("data");
        for d in [&data.pretrain, &data.train, &data.test]
            .into_iter()
            .chain(&data.shards)
        {
            data::write_csv(d, data_dir.join(format!("{}.csv", d.id)))?;
        }
    }
    let mut hashes = BTreeMap::new();
    let mut sink = CheckpointSink {
        dir: dir.map(|d| d.join("checkpoints")),
        hashes: &mut hashes,
    };
    let num_classes = data.train.num_classes.max(data.pretrain.num_classes);
    let model_cfg = cfg.model.config(data.train.dim, num_classes);

    let init = init_model(&model_cfg, seed)?;
    let (base, _) = train(&init, &data.pretrain, &plan.pretrain)?;
    let base_hash = sink.model(
        "pretrained",
        &base,
        &model_metadata(&base, seed, Some(&data.pretrain.id)),
    )?;

    let mut shard_models = Vec::with_capacity(data.shards.len());
    let mut vectors = Vec::with_capacity(data.shards.len());
    for shard in &data.shards {
        let ft = fine_tune(&base, shard, &plan.train)?;
        sink.model(&shard.id, &ft, &model_metadata(&ft, seed, Some(&shard.id)))?;
        let tau = compute_data_vector(&ft, &base, base_hash)?;
        sink.vector(&format!("vector_{}", shard.id), &tau)?;
        vectors.push(tau);
        shard_models.push(ft);
    }
    let heads: Vec<_> = shard_models.iter().map(ModelState::head).collect();
    let lambda = plan.merge.effective_lambda(vectors.len());

    let fused_meta = |s: &ModelState| model_metadata(s, seed, None);

    let tau_sum = sum_data_vectors(&vectors, lambda)?;
    sink.vector("data_vector_sum", &tau_sum)?;
    let dv_raw = apply_data_vector(&base, base_hash, &tau_sum, &heads)?;
    let dv = recalibrate(&dv_raw, &data.shards, &plan.recalibration)?;
    sink.model("fused_data_vector", &dv, &fused_meta(&dv))?;

    let pm_raw = merge_params_mean(&shard_models)?;
    let pm = recalibrate(&pm_raw, &data.shards, &plan.recalibration)?;
    sink.model("fused_params_mean", &pm, &fused_meta(&pm))?;

    let random = random_vector_like(&tau_sum, plan.merge.random_seed);
    sink.vector("random_vector", &random)?;
    let rv_raw = apply_data_vector(&base, base_hash, &random, &heads)?;
    let rv = recalibrate(&rv_raw, &data.shards, &plan.recalibration)?;
    sink.model("fused_random_vector", &rv, &fused_meta(&rv))?;

    let full = fine_tune(&base, &data.train, &plan.train)?;
    sink.model(
        "full",
        &full,
        &model_metadata(&full, seed, Some(&data.train.id)),
    )?;

    let acc = |s: &ModelState| evaluate(s, &data.test).map(|m| m.accuracy);
    let shard_accuracy = shard_models.iter().map(acc).collect::<Result<Vec<_>>>()?;

    let mut candidates = shard_models.clone();
    candidates.push(dv.clone());
    let mut labels: Vec<String> = data.shards.iter().map(|s| s.id.clone()).collect();
    labels.push(CANDIDATE_DATA_VECTOR.into());
    let cosine = cosine_report(&base, &full, &candidates, &labels, cfg.cosine_layers)?;

    let preserved = dv.kind_set(Kind::Parameter) == dv_raw.kind_set(Kind::Parameter)
        && dv.head() == dv_raw.head();

    Ok(SeedReport {
        seed,
        lambda,
        shard_accuracy,
        params_mean: acc(&pm)?,
        data_vector: acc(&dv)?,
        random_vector: acc(&rv)?,
        full_training: acc(&full)?,
        params_mean_before_recalibration: acc(&pm_raw)?,
        data_vector_before_recalibration: acc(&dv_raw)?,
        random_vector_before_recalibration: acc(&rv_raw)?,
        recalibration_preserved_parameters: preserved,
        pretrained_accuracy: acc(&base)?,
        cosine,
        checkpoints: hashes,
    })
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Runs every seed (in parallel up to `cfg.workers`), then writes
/// `report.json`, `table.csv`, `table.md`, `table.json` and `cosine.csv` when
/// an output directory is configured. Seeds that fail leave a `FAILED`
/// marker in their directory; the partial report is still written and the
/// first failure is returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = Instant::now();
    let out = cfg.output_dir.clone();
    let workers = if cfg.workers == 0 {
        cfg.seeds.len()
    } else {
        cfg.workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let results: Vec<Result<SeedReport>> = pool.install(|| {
        use rayon::prelude::*;
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let dir = out.as_deref().map(|o| seed_dir(o, seed));
                run_seed(cfg, seed, dir.as_deref())
            })
            .collect()
    });

    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for (&seed, r) in cfg.seeds.iter().zip(results) {
        match r {
            Ok(s) => seeds.push(s),
            Err(e) => {
                if let Some(o) = &out {
                    let dir = seed_dir(o, seed);
                    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    let marker = dir.join("FAILED");
                    std::fs::write(&marker, format!("{}: {e}\n", e.name()))
                        .map_err(|e| Error::io(&marker, e))?;
                }
                failures.push(SeedFailure {
                    seed,
                    error: format!("{}: {e}", e.name()),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    let report = ExperimentReport {
        config: cfg.clone(),
        seeds,
        failures,
        runtime_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(o) = &out {
        write_outputs(&report, o)?;
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

fn write_outputs(report: &ExperimentReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(
        "report.json",
        serde_json::to_string_pretty(report).expect("report serializes"),
    )?;
    if report.seeds.is_empty() {
        return Ok(());
    }
    for format in [TableFormat::Csv, TableFormat::Markdown, TableFormat::Json] {
        emit_table(
            report,
            format,
            out.join(format!("table.{}", format.extension())),
        )?;
    }
    write("cosine.csv", cosine_csv(report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
    Json,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Markdown => "md",
            TableFormat::Json => "json",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(TableFormat::Csv),
            "md" => Some(TableFormat::Markdown),
            "json" => Some(TableFormat::Json),
            _ => None,
        }
    }
}

pub const TABLE_COLUMNS: [&str; 6] = [
    "part_index",
    "params_mean",
    "data_vector",
    "random_vector",
    "base_model",
    "full_training",
];

/// One row per shard. `base_model` is that shard's model; the merged-method
/// and full-training columns repeat the single model each method produces.
/// Values are accuracies averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub part_index: usize,
    pub params_mean: f64,
    pub data_vector: f64,
    pub random_vector: f64,
    pub base_model: f64,
    pub full_training: f64,
}

impl TableRow {
    fn values(&self) -> [f64; 5] {
        [
            self.params_mean,
            self.data_vector,
            self.random_vector,
            self.base_model,
            self.full_training,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

pub fn build_table(report: &ExperimentReport) -> Result<Table> {
    let first = report
        .seeds
        .first()
        .ok_or_else(|| Error::IncompleteReport("report has no seed results".into()))?;
    let parts = first.shard_accuracy.len();
    if parts == 0 || report.seeds.iter().any(|s| s.shard_accuracy.len() != parts) {
        return Err(Error::IncompleteReport(
            "seeds disagree on the number of shards".into(),
        ));
    }
    let n = report.seeds.len() as f64;
    let mean = |f: &dyn Fn(&SeedReport) -> f64| report.seeds.iter().map(f).sum::<f64>() / n;
    let rows = (0..parts)
        .map(|i| TableRow {
            part_index: i + 1,
            params_mean: mean(&|s| s.params_mean),
            data_vector: mean(&|s| s.data_vector),
            random_vector: mean(&|s| s.random_vector),
            base_model: mean(&|s| s.shard_accuracy[i]),
            full_training: mean(&|s| s.full_training),
        })
        .collect();
    Ok(Table {
        columns: TABLE_COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows,
    })
}

pub fn render_table(table: &Table, format: TableFormat) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&TABLE_COLUMNS.join(","));
            out.push('\n');
            for r in &table.rows {
                let _ = write!(out, "{}", r.part_index);
                for v in r.values() {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            let _ = writeln!(out, "| {} |", TABLE_COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(TABLE_COLUMNS.len()));
            for r in &table.rows {
                let _ = write!(out, "| {} |", r.part_index);
                for v in r.values() {
                    let _ = write!(out, " {v} |");
                }
                out.push('\n');
            }
        }
        TableFormat::Json => {
            out = serde_json::to_string_pretty(table).expect("table serializes");
            out.push('\n');
        }
    }
    out
}

/// Writes the accuracy table of `report` to `path` in `format`.
pub fn emit_table(
    report: &ExperimentReport,
    format: TableFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    let table = build_table(report)?;
    let path = path.as_ref();
    std::fs::write(path, render_table(&table, format)).map_err(|e| Error::io(path, e))
}

fn parse_row(cells: &[&str], line: usize) -> Result<TableRow> {
    let err = |column: usize, message: String| Error::ParseError {
        row: line,
        column,
        message,
    };
    if cells.len() != TABLE_COLUMNS.len() {
        return Err(err(
            1,
            format!(
                "expected {} cells, found {}",
                TABLE_COLUMNS.len(),
                cells.len()
            ),
        ));
    }
    let part_index = cells[0]
        .trim()
        .parse()
        .map_err(|_| err(1, format!("bad part index `{}`", cells[0])))?;
    let mut v = [0.0; 5];
    for (i, slot) in v.iter_mut().enumerate() {
        *slot = cells[i + 1]
            .trim()
            .parse()
            .map_err(|_| err(i + 2, format!("`{}` is not a number", cells[i + 1])))?;
    }
    Ok(TableRow {
        part_index,
        params_mean: v[0],
        data_vector: v[1],
        random_vector: v[2],
        base_model: v[3],
        full_training: v[4],
    })
}

fn check_header(cells: &[&str]) -> Result<()> {
    let got: Vec<&str> = cells.iter().map(|c| c.trim()).collect();
    if got != TABLE_COLUMNS {
        return Err(Error::ParseError {
            row: 1,
            column: 1,
            message: format!("unexpected table header {got:?}"),
        });
    }
    Ok(())
}

/// Parses a table previously produced by [`render_table`].
pub fn parse_table(text: &str, format: TableFormat) -> Result<Table> {
    let rows = match format {
        TableFormat::Json => {
            return serde_json::from_str(text).map_err(|e| Error::ParseError {
                row: e.line(),
                column: e.column(),
                message: e.to_string(),
            })
        }
        TableFormat::Csv => {
            let mut lines = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty());
            let (_, header) = lines.next().ok_or_else(|| Error::ParseError {
                row: 1,
                column: 1,
                message: "empty table".into(),
            })?;
            check_header(&header.split(',').collect::<Vec<_>>())?;
            lines
                .map(|(i, l)| parse_row(&l.split(',').collect::<Vec<_>>(), i + 1))
                .collect::<Result<Vec<_>>>()?
        }
        TableFormat::Markdown => {
            let cells = |l: &str| -> Vec<String> {
                l.trim()
                    .trim_start_matches('|')
                    .trim_end_matches('|')
                    .split('|')
                    .map(|c| c.trim().to_owned())
                    .collect()
            };
            let mut lines = text
                .lines()
                .enumerate()
                .filter(|(_, l)| l.trim_start().starts_with('|'));
            let (_, header) = lines.next().ok_or_else(|| Error::ParseError {
                row: 1,
                column: 1,
                message: "no markdown table".into(),
            })?;
            let h = cells(header);
            check_header(&h.iter().map(String::as_str).collect::<Vec<_>>())?;
            lines
                .filter(|(_, l)| !l.contains("---"))
                .map(|(i, l)| {
                    let c = cells(l);
                    parse_row(&c.iter().map(String::as_str).collect::<Vec<_>>(), i + 1)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(Table {
        columns: TABLE_COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows,
    })
}

/// Loads a table, choosing the parser from the file extension.
pub fn load_table(path: impl AsRef<Path>) -> Result<Table> {
    let path = path.as_ref();
    let format = TableFormat::from_path(path).ok_or_else(|| {
        Error::InvalidConfig(format!("unknown table format for {}", path.display()))
    })?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, format)
}

/// Plot-ready per-layer cosine rows of every seed.
pub fn cosine_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("seed,candidate,layer,depth,cosine,zero_norm\n");
    for s in &report.seeds {
        for r in &s.cosine {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.seed, r.candidate, r.layer, r.depth, r.cosine, r.zero_norm
            );
        }
    }
    out
}

#[doc(hidden)]
pub use merge::BASE_HASH_KEY;
