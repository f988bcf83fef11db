//! `dvm`: the data-vector merging pipeline as composable subcommands.
//!
//! Every stage reads and writes files (`.csv` datasets, `.dvc` checkpoints),
//! so shards can be trained in separate places and only weight artifacts
//! need to move.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dvm_core::analysis::{self, cosine_report, model_metadata, ExperimentConfig, LayerSelection};
use dvm_core::checkpoint::{self, ContentHash};
use dvm_core::data::{self, Dataset};
use dvm_core::merge::{self, LambdaPreset};
use dvm_core::tinynet::init_model;
use dvm_core::trainer::{self, EpochRecord};
use dvm_core::{
    DataVector, Error, Metadata, ModelState, NamedTensorSet, RecalibrationMode, Result, TrainConfig,
};
use serde_json::{json, Value};

const DEFAULT_SEED: u64 = 3315;
const OUT_DIR_ENV: &str = "DVM_OUT_DIR";

#[derive(Parser)]
#[command(name = "dvm", version, about = "Data-vector model merging pipeline")]
struct Cli {
    /// Print one JSON object on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for every random choice of the subcommand.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-blob dataset as CSV.
    GenData(GenData),
    /// Split a dataset into shards, optionally holding out a test set first.
    Split(Split),
    /// Train a freshly initialized model.
    Pretrain(Pretrain),
    /// Fine-tune a base model on one dataset with a fresh head.
    Finetune(Finetune),
    /// Compute the data vector (fine-tuned minus base parameters).
    Vector(VectorCmd),
    /// Fuse models by data vectors, parameter averaging or a random vector.
    Merge(Merge),
    /// Restore batch-norm statistics of a fused model.
    Recalibrate(Recalibrate),
    /// Accuracy and loss of a model on a dataset.
    Eval(Eval),
    /// Per-layer cosine between candidate and full-training deltas.
    Cosine(Cosine),
    /// Run the whole pipeline for every configured seed.
    Experiment(Experiment),
}

#[derive(Args)]
struct GenData {
    /// Experiment config whose synthetic section supplies the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the pretraining (domain-shifted) spec instead of the target spec.
    #[arg(long)]
    pretrain: bool,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    mean_scale: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    sample_stream: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Split {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    parts: usize,
    /// Hold out this fraction as `test.csv` and split the rest (`train.csv`).
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Deal samples without regard to class.
    #[arg(long)]
    no_stratify: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainOpts {
    /// Experiment config supplying optimizer and model defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named optimizer profile, e.g. `paper-table4`.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write per-epoch loss and accuracy as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    data: PathBuf,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Finetune {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VectorCmd {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    finetuned: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MergeMethod {
    DataVector,
    ParamsMean,
    RandomVector,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Fixed,
    OneOverN,
}

#[derive(Args)]
struct Merge {
    #[arg(long, value_enum, default_value = "data-vector")]
    method: MergeMethod,
    /// Base checkpoint the vectors were computed against.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    vectors: Vec<PathBuf>,
    /// Fine-tuned checkpoints whose heads are averaged into the fused model.
    #[arg(long, num_args = 1..)]
    heads: Vec<PathBuf>,
    /// Models to average (params-mean).
    #[arg(long, num_args = 1..)]
    models: Vec<PathBuf>,
    /// Experiment config supplying lambda defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    lambda_preset: Option<Preset>,
    /// Also write the summed (or random) vector that was applied.
    #[arg(long)]
    save_vector: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RecalMode {
    Stats,
    Epoch,
}

#[derive(Args)]
struct Recalibrate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    shards: Vec<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<RecalMode>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stats mode: allow batches to mix samples of different shards.
    #[arg(long)]
    mixed_batches: bool,
    /// Epoch mode: one pass per shard in turn.
    #[arg(long)]
    sequential_shards: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct Cosine {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    full: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    candidates: Vec<PathBuf>,
    /// Candidate labels; defaults to file stems.
    #[arg(long, num_args = 1..)]
    labels: Vec<String>,
    /// Include every parameter tensor, not only linear weights.
    #[arg(long)]
    all_layers: bool,
    /// Write rows as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Experiment {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads; 0 means one per seed.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

/// Relative output paths land under `$DVM_OUT_DIR` when it is set.
fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn experiment_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn read_model(path: &Path) -> Result<(ModelState, ContentHash)> {
    let (set, meta, hash) = checkpoint::read_checkpoint_hashed(path)?;
    Ok((ModelState::from_checkpoint(set, &meta)?, hash))
}

fn read_vector(path: &Path) -> Result<DataVector> {
    let (set, meta) = checkpoint::read_checkpoint(path)?;
    DataVector::from_checkpoint(set, &meta)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

struct Report {
    command: &'static str,
    outputs: Vec<Value>,
    result: Value,
    lines: Vec<String>,
}

impl Report {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            outputs: Vec::new(),
            result: Value::Null,
            lines: Vec::new(),
        }
    }

    fn file(&mut self, path: &Path, hash: Option<ContentHash>) {
        let hash = hash.map(|h| h.to_hex());
        match &hash {
            Some(h) => self.lines.push(format!("{h}  {}", path.display())),
            None => self.lines.push(format!("wrote {}", path.display())),
        }
        self.outputs
            .push(json!({ "path": path.display().to_string(), "hash": hash }));
    }

    fn write_checkpoint(
        &mut self,
        set: &NamedTensorSet,
        meta: &Metadata,
        path: &Path,
    ) -> Result<()> {
        let path = out_path(path);
        let hash = checkpoint::write_checkpoint(set, meta, &path)?;
        self.file(&path, Some(hash));
        Ok(())
    }

    fn write_dataset(&mut self, d: &Dataset, path: &Path) -> Result<()> {
        data::write_csv(d, path)?;
        self.file(path, None);
        Ok(())
    }

    fn print(&self, as_json: bool) {
        if as_json {
            let v =
                json!({ "command": self.command, "outputs": self.outputs, "result": self.result });
            println!("{v}");
        } else {
            for l in &self.lines {
                println!("{l}");
            }
        }
    }
}

fn write_history(history: &[EpochRecord], path: &Path, report: &mut Report) -> Result<()> {
    let path = out_path(path);
    let mut text = String::from("epoch,loss,accuracy\n");
    for r in history {
        text.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.accuracy));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    report.file(&path, None);
    Ok(())
}

fn train_config(section: TrainConfig, opts: &TrainOpts, seed: u64) -> Result<TrainConfig> {
    let mut cfg = match &opts.profile {
        Some(name) => TrainConfig::profile(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown profile `{name}`")))?,
        None => section,
    };
    if let Some(e) = opts.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = opts.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = opts.batch_size {
        cfg.batch_size = b;
    }
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn history_json(history: &[EpochRecord]) -> Value {
    json!(history
        .iter()
        .map(|r| json!({ "epoch": r.epoch, "loss": r.loss, "accuracy": r.accuracy }))
        .collect::<Vec<_>>())
}

fn run(cli: Cli) -> Result<Report> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => {
            let cfg = experiment_config(a.config.as_deref())?;
            let mut spec = if a.pretrain {
                cfg.synthetic.pretrain
            } else {
                cfg.synthetic.target
            };
            spec.seed = seed;
            if let Some(v) = a.classes {
                spec.num_classes = v;
            }
            if let Some(v) = a.dim {
                spec.dim = v;
            }
            if let Some(v) = a.samples_per_class {
                spec.samples_per_class = v;
            }
            if let Some(v) = a.mean_scale {
                spec.mean_scale = v;
            }
            if let Some(v) = a.sigma {
                spec.sigma = v;
            }
            if let Some(v) = a.shift {
                spec.domain_shift = v;
            }
            if let Some(v) = a.sample_stream {
                spec.sample_stream = v;
            }
            let d = data::generate_blobs(&spec)?;
            let mut r = Report::new("gen-data");
            r.write_dataset(&d, &out_path(&a.out))?;
            r.result = json!({ "samples": d.len(), "dim": d.dim, "num_classes": d.num_classes });
            Ok(r)
        }
        Command::Split(a) => {
            let d = data::load_csv(&a.data, None)?;
            let dir = out_path(&a.out_dir);
            let mut r = Report::new("split");
            let to_split = match a.test_fraction {
                Some(f) => {
                    let (train, test) = data::stratified_holdout(&d, f, seed)?;
                    r.write_dataset(&train, &dir.join(format!("{}.csv", train.id)))?;
                    r.write_dataset(&test, &dir.join(format!("{}.csv", test.id)))?;
                    train
                }
                None => d,
            };
            let parts = data::split(&to_split, a.parts, seed, !a.no_stratify)?;
            for p in &parts {
                r.write_dataset(p, &dir.join(format!("{}.csv", p.id)))?;
            }
            r.result = json!({ "part_sizes": parts.iter().map(Dataset::len).collect::<Vec<_>>() });
            Ok(r)
        }
        Command::Pretrain(a) => {
            let cfg = experiment_config(a.train.config.as_deref())?;
            let d = data::load_csv(&a.data, a.num_classes)?;
            let mut settings = cfg.model.clone();
            if let Some(h) = a.hidden {
                settings.hidden_dims = h;
            }
            let tc = train_config(cfg.pretrain.clone(), &a.train, seed)?;
            let init = init_model(&settings.config(d.dim, d.num_classes), seed)?;
            let (state, history) = trainer::train(&init, &d, &tc)?;
            let mut r = Report::new("pretrain");
            r.write_checkpoint(
                state.tensors(),
                &model_metadata(&state, seed, Some(&d.id)),
                &a.out,
            )?;
            if let Some(h) = &a.train.history {
                write_history(&history, h, &mut r)?;
            }
            r.result = json!({ "history": history_json(&history) });
            Ok(r)
        }
        Command::Finetune(a) => {
            let cfg = experiment_config(a.train.config.as_deref())?;
            let (base, _) = read_model(&a.base)?;
            let d = data::load_csv(&a.data, Some(base.config().num_classes))?;
            let tc = train_config(cfg.train.clone(), &a.train, seed)?;
            let (state, history) = trainer::fine_tune_with_history(&base, &d, &tc)?;
            let mut r = Report::new("finetune");
            r.write_checkpoint(
                state.tensors(),
                &model_metadata(&state, seed, Some(&d.id)),
                &a.out,
            )?;
            if let Some(h) = &a.train.history {
                write_history(&history, h, &mut r)?;
            }
            r.result = json!({ "history": history_json(&history) });
            Ok(r)
        }
        Command::Vector(a) => {
            let (base, hash) = read_model(&a.base)?;
            let (ft, _) = read_model(&a.finetuned)?;
            let v = merge::compute_data_vector(&ft, &base, hash)?;
            let mut r = Report::new("vector");
            r.write_checkpoint(v.entries(), &v.metadata(), &a.out)?;
            r.result = json!({ "l2_norm": v.l2_norm(), "base_hash": hash.to_hex() });
            Ok(r)
        }
        Command::Merge(a) => run_merge(a, seed),
        Command::Recalibrate(a) => {
            let cfg = experiment_config(a.config.as_deref())?;
            let mut rc = cfg.recalibration.clone();
            if let Some(m) = a.mode {
                rc.mode = match m {
                    RecalMode::Stats => RecalibrationMode::Stats,
                    RecalMode::Epoch => RecalibrationMode::Epoch,
                };
            }
            if let Some(b) = a.batch_size {
                rc.batch_size = b;
            }
            rc.per_shard_batching &= !a.mixed_batches;
            rc.sequential_shards |= a.sequential_shards;
            rc.train.seed = seed;
            let (model, _) = read_model(&a.model)?;
            let classes = model.config().num_classes;
            let shards = a
                .shards
                .iter()
                .map(|p| data::load_csv(p, Some(classes)))
                .collect::<Result<Vec<_>>>()?;
            let out = dvm_core::recalibrate::recalibrate(&model, &shards, &rc)?;
            let mut r = Report::new("recalibrate");
            r.write_checkpoint(out.tensors(), &model_metadata(&out, seed, None), &a.out)?;
            Ok(r)
        }
        Command::Eval(a) => {
            let (model, _) = read_model(&a.model)?;
            let d = data::load_csv(&a.data, Some(model.config().num_classes))?;
            let m = trainer::evaluate(&model, &d)?;
            let mut r = Report::new("eval");
            r.lines.push(format!("accuracy {}", m.accuracy));
            r.lines.push(format!("loss {}", m.loss));
            for (c, acc) in m.per_class_accuracy.iter().enumerate() {
                if let Some(acc) = acc {
                    r.lines.push(format!("class {c} accuracy {acc}"));
                }
            }
            r.result = json!({ "accuracy": m.accuracy, "loss": m.loss, "per_class_accuracy": m.per_class_accuracy, "samples": d.len() });
            Ok(r)
        }
        Command::Cosine(a) => {
            let (base, _) = read_model(&a.base)?;
            let (full, _) = read_model(&a.full)?;
            let candidates = a
                .candidates
                .iter()
                .map(|p| read_model(p).map(|(m, _)| m))
                .collect::<Result<Vec<_>>>()?;
            let labels = if a.labels.is_empty() {
                a.candidates.iter().map(|p| stem(p)).collect()
            } else {
                a.labels.clone()
            };
            let selection = if a.all_layers {
                LayerSelection::AllParameters
            } else {
                LayerSelection::LinearWeights
            };
            let rows = cosine_report(&base, &full, &candidates, &labels, selection)?;
            let mut r = Report::new("cosine");
            let mut csv = String::from("candidate,layer,depth,cosine,zero_norm\n");
            for row in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.candidate, row.layer, row.depth, row.cosine, row.zero_norm
                ));
            }
            match &a.out {
                Some(p) => {
                    let p = out_path(p);
                    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    }
                    std::fs::write(&p, &csv).map_err(|e| Error::io(&p, e))?;
                    r.file(&p, None);
                }
                None => r.lines.extend(csv.lines().map(str::to_owned)),
            }
            let medians: serde_json::Map<String, Value> = labels
                .iter()
                .map(|l| (l.clone(), json!(analysis::median_cosine(&rows, l))))
                .collect();
            r.result = json!({ "rows": rows.iter().map(|row| json!({
                "candidate": row.candidate, "layer": row.layer, "depth": row.depth,
                "cosine": row.cosine, "zero_norm": row.zero_norm,
            })).collect::<Vec<_>>(), "median": medians });
            Ok(r)
        }
        Command::Experiment(a) => {
            let mut cfg = experiment_config(a.config.as_deref())?;
            if let Some(s) = a.seeds {
                cfg.seeds = s;
            }
            if let Some(w) = a.workers {
                cfg.workers = w;
            }
            let dir = a
                .out_dir
                .map(|d| out_path(&d))
                .or(cfg.output_dir.clone())
                .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("dvm-out"));
            cfg.output_dir = Some(dir.clone());
            let report = analysis::run_experiment(&cfg)?;
            let mut r = Report::new("experiment");
            for name in [
                "report.json",
                "table.csv",
                "table.md",
                "table.json",
                "cosine.csv",
            ] {
                r.file(&dir.join(name), None);
            }
            let table = analysis::build_table(&report)?;
            r.lines.push(analysis::render_table(
                &table,
                analysis::TableFormat::Markdown,
            ));
            r.result = json!({ "seeds": cfg.seeds, "runtime_secs": report.runtime_secs, "table": serde_json::to_value(&table).expect("table serializes") });
            Ok(r)
        }
    }
}

fn run_merge(a: Merge, seed: u64) -> Result<Report> {
    let cfg = experiment_config(a.config.as_deref())?;
    let mut mc = cfg.merge.clone();
    if let Some(l) = a.lambda {
        mc.lambda = l;
        mc.lambda_preset = LambdaPreset::Fixed;
    }
    if let Some(p) = a.lambda_preset {
        mc.lambda_preset = match p {
            Preset::Fixed => LambdaPreset::Fixed,
            Preset::OneOverN => LambdaPreset::OneOverN,
        };
    }
    mc.random_seed = seed;
    mc.validate()?;
    let mut r = Report::new("merge");

    if let MergeMethod::ParamsMean = a.method {
        if a.models.is_empty() {
            return Err(Error::EmptyList("params-mean needs --models".into()));
        }
        let models = a
            .models
            .iter()
            .map(|p| read_model(p).map(|(m, _)| m))
            .collect::<Result<Vec<_>>>()?;
        let fused = merge::merge_params_mean(&models)?;
        r.write_checkpoint(fused.tensors(), &model_metadata(&fused, seed, None), &a.out)?;
        r.result = json!({ "method": "params-mean", "models": models.len() });
        return Ok(r);
    }

    let base_path = a
        .base
        .as_deref()
        .ok_or_else(|| Error::MissingBase("--base is required for vector merges".into()))?;
    let (base, base_hash) = read_model(base_path)?;
    let vectors = a
        .vectors
        .iter()
        .map(|p| read_vector(p))
        .collect::<Result<Vec<_>>>()?;
    let heads = a
        .heads
        .iter()
        .map(|p| read_model(p).map(|(m, _)| m.head()))
        .collect::<Result<Vec<_>>>()?;
    let lambda = mc.effective_lambda(vectors.len());
    let summed = merge::sum_data_vectors(&vectors, lambda)?;
    let (applied, method) = match a.method {
        MergeMethod::RandomVector => (
            merge::random_vector_like(&summed, mc.random_seed),
            "random-vector",
        ),
        _ => (summed, "data-vector"),
    };
    let fused = merge::apply_data_vector(&base, base_hash, &applied, &heads)?;
    if let Some(p) = &a.save_vector {
        r.write_checkpoint(applied.entries(), &applied.metadata(), p)?;
    }
    r.write_checkpoint(fused.tensors(), &model_metadata(&fused, seed, None), &a.out)?;
    r.result = json!({ "method": method, "lambda": lambda, "vectors": vectors.len(), "heads": heads.len() });
    Ok(r)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let as_json = cli.json;
    match run(cli) {
        Ok(report) => {
            report.print(as_json);
            ExitCode::SUCCESS
        }
        Err(e) => {
            if as_json {
                println!("{}", json!({ "error": e.name(), "message": e.to_string() }));
            }
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(1)
        }
    }
}
