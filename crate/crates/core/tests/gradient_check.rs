use dvm_core::tinynet::{init_model, weighted_cross_entropy, Batch, Mode, ModelConfig, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FLOOR: f64 = 1e-6;

struct Problem {
    w: Weights,
    batch: Batch,
    class_weights: [f64; 3],
}

fn problem(seed: u64, perturb: bool) -> Problem {
    let cfg = ModelConfig::new(5, 3).with_hidden(vec![6, 4]);
    let state = init_model(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let features: Vec<f32> = (0..8 * 5).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let batch = Batch::new(features, 5, labels).unwrap();
    let mut w = Weights::from_state(&state);
    if perturb {
        for name in w.trainable_names() {
            for v in w.get_mut(&name).unwrap() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    Problem {
        w,
        batch,
        class_weights: [0.5, 1.0, 2.0],
    }
}

impl Problem {
    fn loss(&self) -> f64 {
        let (logits, _) = self.w.forward(&self.batch, Mode::Train).unwrap();
        weighted_cross_entropy(&logits, &self.batch.labels, &self.class_weights)
            .unwrap()
            .0
    }

    /// (analytic, central difference) for every trainable coordinate.
    fn pairs(&mut self, h: f64) -> Vec<(f64, f64)> {
        let (logits, cache) = self.w.forward(&self.batch, Mode::Train).unwrap();
        let (_, d) =
            weighted_cross_entropy(&logits, &self.batch.labels, &self.class_weights).unwrap();
        let grads = self.w.backward(&cache, &d).unwrap();
        let mut out = Vec::new();
        for name in self.w.trainable_names() {
            for (i, &a) in grads[&name].iter().enumerate() {
                let orig = self.w.get_mut(&name).unwrap()[i];
                self.w.get_mut(&name).unwrap()[i] = orig + h;
                let up = self.loss();
                self.w.get_mut(&name).unwrap()[i] = orig - h;
                let down = self.loss();
                self.w.get_mut(&name).unwrap()[i] = orig;
                out.push((a, (up - down) / (2.0 * h)));
            }
        }
        out
    }
}

fn max_relative(pairs: &[(f64, f64)]) -> f64 {
    pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

#[test]
fn gradients_agree_with_fine_step_differences() {
    for seed in [1, 2, 3] {
        for perturb in [false, true] {
            let err = max_relative(&problem(seed, perturb).pairs(1e-5));
            assert!(err < 1e-4, "seed {seed} perturb {perturb}: {err:e}");
        }
    }
}

// The residual at a coarse step is the O(h^2) truncation of the central
// difference: halving h divides the worst absolute gap by four.
#[test]
fn coarse_step_residual_is_second_order_truncation() {
    for seed in [1, 2, 3] {
        let mut p = problem(seed, false);
        let gap =
            |pairs: Vec<(f64, f64)>| pairs.iter().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let coarse = gap(p.pairs(2e-3));
        let fine = gap(p.pairs(1e-3));
        let ratio = coarse / fine;
        assert!((3.5..4.5).contains(&ratio), "seed {seed}: ratio {ratio}");
    }
}

#[test]
fn pre_normalization_bias_gradient_vanishes() {
    let p = problem(4, true);
    let (logits, cache) = p.w.forward(&p.batch, Mode::Train).unwrap();
    let (_, d) = weighted_cross_entropy(&logits, &p.batch.labels, &p.class_weights).unwrap();
    let grads = p.w.backward(&cache, &d).unwrap();
    for name in ["block0.linear.bias", "block1.linear.bias"] {
        assert!(grads[name].iter().all(|v| v.abs() < 1e-12), "{name}");
    }
}
