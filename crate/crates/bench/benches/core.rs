use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dvm_core::checkpoint::{decode, encode, ContentHash};
use dvm_core::data::{generate_blobs, SyntheticSpec};
use dvm_core::merge::{compute_data_vector, sum_data_vectors};
use dvm_core::tensor::combine;
use dvm_core::tinynet::{backward, forward, init_model, weighted_cross_entropy, Batch, Mode};
use dvm_core::trainer::{fine_tune, TrainConfig};
use dvm_core::ModelConfig;

fn config() -> ModelConfig {
    ModelConfig::new(16, 4).with_hidden(vec![256, 128])
}

fn tensor_ops(c: &mut Criterion) {
    let a = init_model(&config(), 1).unwrap();
    let b = init_model(&config(), 2).unwrap();
    c.bench_function("combine", |bench| {
        bench.iter(|| combine(black_box(a.tensors()), black_box(b.tensors()), 1.0, -1.0).unwrap())
    });

    let base = init_model(&config(), 0).unwrap();
    let hash = ContentHash::of_bytes(b"base");
    let vectors: Vec<_> = (1..=8)
        .map(|s| compute_data_vector(&init_model(&config(), s).unwrap(), &base, hash).unwrap())
        .collect();
    c.bench_function("sum_data_vectors/8", |bench| {
        bench.iter(|| sum_data_vectors(black_box(&vectors), 0.5).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let state = init_model(&config(), 1).unwrap();
    let data = generate_blobs(&SyntheticSpec {
        samples_per_class: 8,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let batch = Batch::whole(&data);
    c.bench_function("forward_backward/32", |bench| {
        bench.iter(|| {
            let out = forward(&state, &batch, Mode::Train).unwrap();
            let (_, d) = weighted_cross_entropy(&out.logits, &batch.labels, &[1.0; 4]).unwrap();
            backward(&state, &out.cache, &d).unwrap()
        })
    });

    let shard = generate_blobs(&SyntheticSpec {
        samples_per_class: 64,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let small = init_model(&ModelConfig::new(16, 4), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    c.bench_function("fine_tune_epoch/256", |bench| {
        bench.iter(|| fine_tune(black_box(&small), &shard, &cfg).unwrap())
    });
}

fn serialization(c: &mut Criterion) {
    let state = init_model(&config(), 1).unwrap();
    let meta = state.metadata();
    let bytes = encode(state.tensors(), &meta);
    c.bench_function("checkpoint_encode", |bench| {
        bench.iter(|| encode(black_box(state.tensors()), &meta))
    });
    c.bench_function("checkpoint_decode", |bench| {
        bench.iter(|| decode(black_box(&bytes)).unwrap())
    });
}

criterion_group!(benches, tensor_ops, network, serialization);
criterion_main!(benches);
