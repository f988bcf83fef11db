mod common;

use common::{base_and_hash, perturbed};
use dvm_core::data::{class_weights, generate_blobs, split, Dataset, SyntheticSpec};
use dvm_core::merge::{
    apply_data_vector, compute_data_vector, merge_params_mean, sum_data_vectors,
};
use dvm_core::tensor::{combine, layer_cosine, scale};
use dvm_core::tinynet::{forward, softmax, Batch, Matrix, Mode};
use dvm_core::{Kind, ModelState, NamedTensorSet, Tensor};
use proptest::prelude::*;

fn set_from(values: &[Vec<f32>]) -> NamedTensorSet {
    let mut s = NamedTensorSet::new();
    for (i, v) in values.iter().enumerate() {
        s.insert(
            format!("layer{i}"),
            Tensor::from_vec(v.clone()).unwrap(),
            Kind::Parameter,
        );
    }
    s
}

/// Three sets with identical layout, parameter-scale values.
fn triple() -> impl Strategy<Value = [NamedTensorSet; 3]> {
    prop::collection::vec(1usize..20, 1..4).prop_flat_map(|lens| {
        let one = lens
            .iter()
            .map(|&n| prop::collection::vec(-1.0f32..1.0, n))
            .collect::<Vec<_>>();
        (one.clone(), one.clone(), one)
            .prop_map(|(a, b, c)| [set_from(&a), set_from(&b), set_from(&c)])
    })
}

fn ulp_distance(a: f32, b: f32) -> u32 {
    if a == b {
        return 0;
    }
    let key = |x: f32| {
        let bits = x.to_bits() as i64;
        if bits < 0x8000_0000 {
            bits
        } else {
            0x8000_0000 - bits
        }
    };
    (key(a) - key(b)).unsigned_abs() as u32
}

fn flat(s: &NamedTensorSet) -> Vec<f32> {
    s.iter()
        .flat_map(|(_, e)| e.tensor.data().to_vec())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn combine_is_associative_to_rounding([x, y, z] in triple()) {
        let left = combine(&x, &combine(&y, &z, 1.0, 1.0).unwrap(), 1.0, 1.0).unwrap();
        let right = combine(&combine(&x, &y, 1.0, 1.0).unwrap(), &z, 1.0, 1.0).unwrap();
        for (a, b) in flat(&left).iter().zip(flat(&right)) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn combine_preserves_names_and_shapes([x, y, _z] in triple(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let c = combine(&x, &y, alpha, beta).unwrap();
        prop_assert_eq!(c.names().collect::<Vec<_>>(), x.names().collect::<Vec<_>>());
        for ((_, a), (_, b)) in c.iter().zip(x.iter()) {
            prop_assert_eq!(a.tensor.shape(), b.tensor.shape());
            prop_assert_eq!(a.kind, b.kind);
        }
    }

    #[test]
    fn nested_scale_is_within_one_ulp([x, _y, _z] in triple(), a in 0.1f64..10.0, b in -10.0f64..10.0) {
        let twice = scale(&scale(&x, a), b);
        let once = scale(&x, a * b);
        for (p, q) in flat(&twice).iter().zip(flat(&once)) {
            prop_assert!(ulp_distance(*p, q) <= 1, "{} vs {}", p, q);
        }
    }

    #[test]
    fn cosine_is_invariant_to_power_of_two_scaling([x, y, _z] in triple(), k in -20i32..20) {
        let base = layer_cosine(&x, &y).unwrap();
        let scaled = layer_cosine(&scale(&x, 2f64.powi(k)), &y).unwrap();
        for (name, c) in &base {
            prop_assert!((c.cosine - scaled[name].cosine).abs() <= 1e-12);
        }
    }

    // Arbitrary positive factors round each stored f32, so invariance holds
    // only to single-precision accuracy.
    #[test]
    fn cosine_is_invariant_to_positive_scaling_up_to_storage_rounding([x, y, _z] in triple(), alpha in 1e-3f64..1e3) {
        let base = layer_cosine(&x, &y).unwrap();
        let scaled = layer_cosine(&scale(&x, alpha), &y).unwrap();
        for (name, c) in &base {
            prop_assert!((c.cosine - scaled[name].cosine).abs() <= 1e-6);
        }
    }

    #[test]
    fn split_parts_partition_the_input(n in 1usize..120, classes in 1usize..5, parts in 1usize..6, seed in any::<u64>(), stratified in any::<bool>()) {
        prop_assume!(parts <= n);
        let features: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i * 7) % classes).collect();
        let data = Dataset::new(features, 1, labels, classes, "d").unwrap();
        let out = split(&data, parts, seed, stratified).unwrap();
        prop_assert_eq!(out.len(), parts);
        let mut seen: Vec<usize> = out.iter().flat_map(|p| p.features.iter().map(|&f| f as usize)).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        for p in &out {
            for (i, &f) in p.features.iter().enumerate() {
                prop_assert_eq!(p.labels[i], data.labels[f as usize]);
            }
        }
        let again = split(&data, parts, seed, stratified).unwrap();
        prop_assert_eq!(out, again);
    }

    #[test]
    fn class_weights_reweight_to_sample_count(counts in prop::collection::vec(1usize..50, 1..6)) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
        let n = labels.len();
        let data = Dataset::new(vec![0.0; n], 1, labels, counts.len(), "d").unwrap();
        let w = class_weights(&data);
        let total: f64 = counts.iter().zip(&w).map(|(&c, &w)| c as f64 * w).sum();
        prop_assert!((total - n as f64).abs() <= 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut m = Matrix::zeros(3, 4);
        for i in 0..3 {
            m.row_mut(i).copy_from_slice(&values[i * 4..i * 4 + 4]);
        }
        let p = softmax(&m);
        for i in 0..3 {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

fn vectors(
    seed: u64,
    n: usize,
) -> (
    ModelState,
    dvm_core::ContentHash,
    Vec<ModelState>,
    Vec<dvm_core::DataVector>,
) {
    let (base, hash) = base_and_hash(seed);
    let fts: Vec<ModelState> = (0..n)
        .map(|i| perturbed(&base, seed * 100 + i as u64, 0.2))
        .collect();
    let taus = fts
        .iter()
        .map(|ft| compute_data_vector(ft, &base, hash).unwrap())
        .collect();
    (base, hash, fts, taus)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fusion_is_linear_in_lambda(seed in 0u64..1000) {
        let (base, hash, _, taus) = vectors(seed, 3);
        for lambda in [0.0, 0.25, 0.5, 1.0] {
            let fused = apply_data_vector(&base, hash, &sum_data_vectors(&taus, lambda).unwrap(), &[]).unwrap();
            for (name, e) in fused.parameters().iter() {
                let b = base.tensors().tensor(name).unwrap().data();
                for (i, &got) in e.tensor.data().iter().enumerate() {
                    let sum: f64 = taus.iter().map(|t| f64::from(t.entries().tensor(name).unwrap().data()[i])).sum();
                    let want = f64::from(b[i]) + lambda * sum;
                    prop_assert!((f64::from(got) - want).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn vector_sum_is_permutation_invariant(seed in 0u64..1000) {
        let (_, _, _, taus) = vectors(seed, 3);
        let reference = sum_data_vectors(&taus, 0.5).unwrap();
        for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let shuffled: Vec<_> = perm.iter().map(|&i| taus[i].clone()).collect();
            prop_assert_eq!(&sum_data_vectors(&shuffled, 0.5).unwrap(), &reference);
        }
    }

    #[test]
    fn zero_lambda_fusion_is_the_base(seed in 0u64..1000) {
        let (base, hash, fts, taus) = vectors(seed, 3);
        let heads: Vec<_> = fts.iter().map(ModelState::head).collect();
        let fused = apply_data_vector(&base, hash, &sum_data_vectors(&taus, 0.0).unwrap(), &heads).unwrap();
        prop_assert_eq!(fused.parameters(), base.parameters());
        prop_assert_eq!(fused.buffers(), base.buffers());
    }

    #[test]
    fn single_vector_unit_lambda_recovers_fine_tuned(seed in 0u64..1000) {
        let (base, hash, fts, taus) = vectors(seed, 1);
        let fused = apply_data_vector(&base, hash, &sum_data_vectors(&taus, 1.0).unwrap(), &[fts[0].head()]).unwrap();
        for (name, e) in fused.parameters().iter() {
            let want = fts[0].tensors().tensor(name).unwrap().data();
            let b = base.tensors().tensor(name).unwrap().data();
            for i in 0..want.len() {
                let scale = want[i].abs().max(b[i].abs());
                prop_assert!((e.tensor.data()[i] - want[i]).abs() <= 1e-5 * scale);
            }
        }
        prop_assert_eq!(fused.head(), fts[0].head());
    }

    #[test]
    fn params_mean_equals_data_vector_at_one_over_n(seed in 0u64..1000) {
        let (base, hash, fts, taus) = vectors(seed, 3);
        let heads: Vec<_> = fts.iter().map(ModelState::head).collect();
        let dv = apply_data_vector(&base, hash, &sum_data_vectors(&taus, 1.0 / 3.0).unwrap(), &heads).unwrap();
        let pm = merge_params_mean(&fts).unwrap();
        for kind in [Kind::Parameter, Kind::Head] {
            for (name, e) in dv.kind_set(kind).iter() {
                let other = pm.tensors().tensor(name).unwrap().data();
                for (a, b) in e.tensor.data().iter().zip(other) {
                    prop_assert!((a - b).abs() <= 1e-5);
                }
            }
        }
    }
}

#[test]
fn eval_forward_leaves_state_unchanged() {
    let (base, _) = base_and_hash(3);
    let state = perturbed(&base, 9, 0.1);
    let data = generate_blobs(&SyntheticSpec {
        dim: 5,
        num_classes: 3,
        samples_per_class: 4,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let out = forward(&state, &Batch::whole(&data), Mode::Eval).unwrap();
    assert_eq!(out.state, state);
    let train = forward(&state, &Batch::whole(&data), Mode::Train).unwrap();
    assert_ne!(train.state.buffers(), state.buffers());
    let again = forward(&state, &Batch::whole(&data), Mode::Train).unwrap();
    assert_eq!(again.state, train.state);
}

#[test]
fn generation_is_a_function_of_the_seed() {
    let spec = SyntheticSpec::default();
    assert_eq!(
        generate_blobs(&spec).unwrap(),
        generate_blobs(&spec).unwrap()
    );
    let other = SyntheticSpec {
        seed: spec.seed + 1,
        ..spec.clone()
    };
    assert_ne!(
        generate_blobs(&spec).unwrap(),
        generate_blobs(&other).unwrap()
    );
}
