//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{base_and_hash, perturbed};
use dvm_core::analysis::{
    median_cosine, run_experiment, shard_label, ExperimentConfig, ExperimentReport,
    CANDIDATE_DATA_VECTOR,
};
use dvm_core::checkpoint::{decode, encode, read_checkpoint, write_checkpoint};
use dvm_core::merge::{
    apply_data_vector, compute_data_vector, merge_params_mean, sum_data_vectors,
};
use dvm_core::tinynet::{init_model, weighted_cross_entropy, Batch, Mode, ModelConfig, Weights};
use dvm_core::{Error, Kind, ModelState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RECOVERY_RELATIVE: f32 = 1e-5;
const EQUIVALENCE_ABSOLUTE: f32 = 1e-5;
const FD_STEP: f64 = 1e-3;
const FD_RELATIVE: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;
const FUZZ_CASES: usize = 20_000;
const MIN_SEEDS: usize = 4;

const LIMIT_EXACT: Duration = Duration::from_secs(5);
const LIMIT_GRADIENT: Duration = Duration::from_secs(30);
const LIMIT_SERIALIZATION: Duration = Duration::from_secs(10);
const FUZZ_BUDGET: Duration = Duration::from_secs(60);
const LIMIT_BENCHMARK: Duration = Duration::from_secs(300);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    if took > limit {
        o.pass = false;
    }
    o.detail = format!(
        "{}; {:.2}s (limit {}s)",
        o.detail,
        took.as_secs_f64(),
        limit.as_secs()
    );
    o
}

fn exact_arithmetic() -> Outcome {
    let mut worst_recovery: f32 = 0.0;
    let mut worst_equivalence: f32 = 0.0;
    let mut zero_ok = true;
    let mut perm_ok = true;
    for instance in 0..10u64 {
        let (base, hash) = base_and_hash(1000 + instance);
        let fts: Vec<ModelState> = (0..3)
            .map(|i| perturbed(&base, instance * 10 + i, 0.25))
            .collect();
        let taus: Vec<_> = fts
            .iter()
            .map(|f| compute_data_vector(f, &base, hash).unwrap())
            .collect();
        let heads: Vec<_> = fts.iter().map(ModelState::head).collect();

        for (ft, tau) in fts.iter().zip(&taus) {
            let back = apply_data_vector(&base, hash, tau, &[ft.head()]).unwrap();
            for (name, e) in back.parameters().iter() {
                let want = ft.tensors().tensor(name).unwrap().data();
                let b = base.tensors().tensor(name).unwrap().data();
                for (i, &got) in e.tensor.data().iter().enumerate() {
                    let scale = want[i].abs().max(b[i].abs());
                    if scale > 0.0 {
                        worst_recovery = worst_recovery.max((got - want[i]).abs() / scale);
                    }
                }
            }
        }

        let zero =
            apply_data_vector(&base, hash, &sum_data_vectors(&taus, 0.0).unwrap(), &heads).unwrap();
        zero_ok &= zero.parameters() == base.parameters() && zero.buffers() == base.buffers();

        let reference = sum_data_vectors(&taus, 0.5).unwrap();
        for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let v: Vec<_> = perm.iter().map(|&i| taus[i].clone()).collect();
            perm_ok &= sum_data_vectors(&v, 0.5).unwrap() == reference;
        }

        let dv = apply_data_vector(
            &base,
            hash,
            &sum_data_vectors(&taus, 1.0 / 3.0).unwrap(),
            &heads,
        )
        .unwrap();
        let pm = merge_params_mean(&fts).unwrap();
        for (name, e) in dv.kind_set(Kind::Parameter).iter() {
            for (a, b) in e
                .tensor
                .data()
                .iter()
                .zip(pm.tensors().tensor(name).unwrap().data())
            {
                worst_equivalence = worst_equivalence.max((a - b).abs());
            }
        }
    }
    let pass = worst_recovery <= RECOVERY_RELATIVE
        && zero_ok
        && perm_ok
        && worst_equivalence <= EQUIVALENCE_ABSOLUTE;
    outcome(
        pass,
        format!(
            "recovery rel {worst_recovery:.2e}, lambda=0 exact {zero_ok}, permutation bit-exact {perm_ok}, params-mean vs 1/N {worst_equivalence:.2e}"
        ),
    )
}

fn fd_relative_error(seed: u64) -> f64 {
    let cfg = ModelConfig::new(5, 3).with_hidden(vec![6, 4]);
    let state = init_model(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let features: Vec<f32> = (0..8 * 5).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let batch = Batch::new(features, 5, (0..8).map(|i| i % 3).collect()).unwrap();
    let class_weights = [0.5, 1.0, 2.0];
    let mut w = Weights::from_state(&state);
    let loss = |w: &Weights| {
        let (logits, _) = w.forward(&batch, Mode::Train).unwrap();
        weighted_cross_entropy(&logits, &batch.labels, &class_weights)
            .unwrap()
            .0
    };
    let (logits, cache) = w.forward(&batch, Mode::Train).unwrap();
    let (_, d) = weighted_cross_entropy(&logits, &batch.labels, &class_weights).unwrap();
    let grads = w.backward(&cache, &d).unwrap();
    let mut worst: f64 = 0.0;
    for name in w.trainable_names() {
        for (i, &a) in grads[&name].iter().enumerate() {
            let orig = w.get_mut(&name).unwrap()[i];
            w.get_mut(&name).unwrap()[i] = orig + FD_STEP;
            let up = loss(&w);
            w.get_mut(&name).unwrap()[i] = orig - FD_STEP;
            let down = loss(&w);
            w.get_mut(&name).unwrap()[i] = orig;
            let n = (up - down) / (2.0 * FD_STEP);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR));
        }
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let errs: Vec<f64> = [1, 2, 3].into_iter().map(fd_relative_error).collect();
    let pass = errs.iter().all(|&e| e < FD_RELATIVE);
    let list: Vec<String> = errs.iter().map(|e| format!("{e:.2e}")).collect();
    outcome(
        pass,
        format!(
            "max relative error per seed [{}] (bound {FD_RELATIVE:e}, h={FD_STEP:e})",
            list.join(", ")
        ),
    )
}

fn serialization() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (base, _) = base_and_hash(7);
    let state = perturbed(&base, 8, 0.3);
    let a = dir.path().join("a.dvc");
    let b = dir.path().join("b.dvc");
    write_checkpoint(state.tensors(), &state.metadata(), &a).unwrap();
    let (set, meta) = read_checkpoint(&a).unwrap();
    write_checkpoint(&set, &meta, &b).unwrap();
    let identical = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();

    let bytes = encode(state.tensors(), &state.metadata());
    let header_end = 16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(3315);
    let started = Instant::now();
    let mut unexpected = 0usize;
    let mut cases = 0usize;
    while cases < FUZZ_CASES && started.elapsed() < FUZZ_BUDGET {
        let mut fuzzed = bytes.clone();
        match rng.random_range(0..3) {
            0 => {
                for _ in 0..rng.random_range(1..6) {
                    let at = rng.random_range(0..header_end);
                    fuzzed[at] = rng.random();
                }
            }
            1 => fuzzed.truncate(rng.random_range(0..bytes.len())),
            _ => fuzzed[8..16].copy_from_slice(&rng.random::<u64>().to_le_bytes()),
        }
        let result = std::panic::catch_unwind(|| decode(&fuzzed));
        match result {
            Ok(Ok(_)) | Ok(Err(Error::CorruptFile(_))) | Ok(Err(Error::VersionUnsupported(_))) => {}
            _ => unexpected += 1,
        }
        cases += 1;
    }
    outcome(
        identical && unexpected == 0,
        format!(
            "write-read-write identical {identical}, {cases} fuzz cases, {unexpected} non-graceful"
        ),
    )
}

fn count(report: &ExperimentReport, f: impl Fn(&dvm_core::analysis::SeedReport) -> bool) -> usize {
    report.seeds.iter().filter(|s| f(s)).count()
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("1 exact arithmetic", timed(LIMIT_EXACT, exact_arithmetic)));
    results.push((
        "2 gradient correctness",
        timed(LIMIT_GRADIENT, gradient_correctness),
    ));
    results.push((
        "3 serialization",
        timed(LIMIT_SERIALIZATION + FUZZ_BUDGET, serialization),
    ));

    let cfg = ExperimentConfig {
        workers: 1,
        ..ExperimentConfig::default()
    };
    let started = Instant::now();
    let report = run_experiment(&cfg);
    let took = started.elapsed();
    match report {
        Ok(report) => {
            let seeds = report.seeds.len();
            let a = count(&report, |s| s.data_vector > s.mean_shard_accuracy());
            let b = count(&report, |s| s.data_vector >= s.params_mean);
            let c = count(&report, |s| {
                s.shard_accuracy.iter().all(|&acc| s.random_vector < acc)
            });
            let within = took <= LIMIT_BENCHMARK;
            results.push((
                "4 qualitative orderings",
                outcome(
                    a >= MIN_SEEDS && b >= MIN_SEEDS && c >= MIN_SEEDS && within && seeds == 5,
                    format!(
                        "(a) dv > shard mean {a}/{seeds}, (b) dv >= params-mean {b}/{seeds}, (c) random < every shard {c}/{seeds}; lambda {}; {:.1}s single core (limit {}s)",
                        cfg.merge.lambda,
                        took.as_secs_f64(),
                        LIMIT_BENCHMARK.as_secs()
                    ),
                ),
            ));
            let cos = count(&report, |s| {
                let dv = median_cosine(&s.cosine, CANDIDATE_DATA_VECTOR).unwrap_or(f64::NAN);
                (0..s.shard_accuracy.len())
                    .all(|i| median_cosine(&s.cosine, &shard_label(i)).is_some_and(|c| dv >= c))
            });
            results.push((
                "5 layer cosine",
                outcome(
                    cos >= MIN_SEEDS,
                    format!("fused median >= every shard median {cos}/{seeds}"),
                ),
            ));
            let preserved = report
                .seeds
                .iter()
                .all(|s| s.recalibration_preserved_parameters);
            let kept = count(&report, |s| {
                s.data_vector >= s.data_vector_before_recalibration
            });
            results.push((
                "6 recalibration contract",
                outcome(
                    preserved && kept >= MIN_SEEDS,
                    format!("parameters/heads bit-exact {preserved}, accuracy not decreased {kept}/{seeds}"),
                ),
            ));
        }
        Err(e) => {
            for name in [
                "4 qualitative orderings",
                "5 layer cosine",
                "6 recalibration contract",
            ] {
                results.push((name, outcome(false, format!("experiment failed: {e}"))));
            }
        }
    }

    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "criterion {name}: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
