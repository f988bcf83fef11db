//! Calibration sweep for the synthetic benchmark noise level.
//!
//! For each (sigma, domain shift, lambda) it runs the default five-seed
//! experiment and prints how many seeds satisfy each ordering check.
//!
//! ```text
//! cargo run --release -p dvm-core --example sigma_sweep -- 1.0,1.6,2.0 0.5,1.0 0.25,0.5
//! ```

use dvm_core::analysis::{
    median_cosine, run_experiment, shard_label, ExperimentConfig, SeedReport, CANDIDATE_DATA_VECTOR,
};

fn list(arg: Option<String>, default: &[f64]) -> Vec<f64> {
    match arg {
        Some(s) => s.split(',').map(|v| v.parse().expect("number")).collect(),
        None => default.to_vec(),
    }
}

fn checks(s: &SeedReport) -> [bool; 5] {
    let shard_cos: Vec<f64> = (0..s.shard_accuracy.len())
        .map(|i| median_cosine(&s.cosine, &shard_label(i)).unwrap())
        .collect();
    let dv_cos = median_cosine(&s.cosine, CANDIDATE_DATA_VECTOR).unwrap();
    [
        s.data_vector > s.mean_shard_accuracy(),
        s.data_vector >= s.params_mean,
        s.shard_accuracy.iter().all(|&a| s.random_vector < a),
        shard_cos.iter().all(|&c| dv_cos >= c),
        s.data_vector >= s.data_vector_before_recalibration,
    ]
}

fn main() {
    let mut args = std::env::args().skip(1);
    let sigmas = list(args.next(), &[0.8, 1.2, 1.6, 2.0, 2.5]);
    let shifts = list(args.next(), &[1.0]);
    let lambdas = list(args.next(), &[0.25, 0.5]);
    println!("sigma,shift,lambda,shard_acc,dv,pm,rv,full,a,b,c,cos,recal,secs");
    for &sigma in &sigmas {
        for &shift in &shifts {
            for &lambda in &lambdas {
                let mut cfg = ExperimentConfig::default();
                cfg.synthetic.target.sigma = sigma;
                cfg.synthetic.pretrain.sigma = sigma;
                cfg.synthetic.pretrain.domain_shift = shift;
                cfg.merge.lambda = lambda;
                cfg.workers = 1;
                let r = run_experiment(&cfg).expect("experiment");
                let n = r.seeds.len() as f64;
                let mean = |f: &dyn Fn(&SeedReport) -> f64| r.seeds.iter().map(f).sum::<f64>() / n;
                let mut counts = [0; 5];
                for s in &r.seeds {
                    for (c, ok) in counts.iter_mut().zip(checks(s)) {
                        *c += usize::from(ok);
                    }
                }
                println!(
                    "{sigma},{shift},{lambda},{:.3},{:.3},{:.3},{:.3},{:.3},{},{},{},{},{},{:.1}",
                    mean(&|s| s.mean_shard_accuracy()),
                    mean(&|s| s.data_vector),
                    mean(&|s| s.params_mean),
                    mean(&|s| s.random_vector),
                    mean(&|s| s.full_training),
                    counts[0],
                    counts[1],
                    counts[2],
                    counts[3],
                    counts[4],
                    r.runtime_secs
                );
            }
        }
    }
}
