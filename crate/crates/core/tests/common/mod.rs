#![allow(dead_code)]

use dvm_core::checkpoint::{encode, ContentHash};
use dvm_core::tinynet::{init_model, ModelConfig, ModelState};
use dvm_core::{Kind, NamedTensorSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config() -> ModelConfig {
    ModelConfig::new(5, 3).with_hidden(vec![6, 4])
}

/// `base` with every parameter and head element moved by uniform noise in
/// `[-scale, scale]`; running means shifted, running variances rescaled.
pub fn perturbed(base: &ModelState, seed: u64, scale: f32) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = NamedTensorSet::new();
    for (name, e) in base.tensors().iter() {
        let data: Vec<f32> = e
            .tensor
            .data()
            .iter()
            .map(|&v| match e.kind {
                Kind::Buffer if name.ends_with("running_var") => v * rng.random_range(0.5f32..2.0),
                Kind::Buffer if name.ends_with("running_mean") => {
                    v + rng.random_range(-scale..scale)
                }
                Kind::Buffer => v,
                _ => v + rng.random_range(-scale..scale),
            })
            .collect();
        set.insert(
            name,
            Tensor::new(e.tensor.shape().to_vec(), data).unwrap(),
            e.kind,
        );
    }
    ModelState::from_parts(base.config().clone(), set).unwrap()
}

pub fn base_and_hash(seed: u64) -> (ModelState, ContentHash) {
    let base = init_model(&small_config(), seed).unwrap();
    let hash = ContentHash::of_bytes(&encode(base.tensors(), &base.metadata()));
    (base, hash)
}
