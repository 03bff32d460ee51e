use ensyth_core::data::{split, subset_classes, synth_blobs};
use ensyth_core::network::{forward, forward_homogeneous, train, PerLayer};
use ensyth_core::tensor::{matmul, DenseMatrix};
use ensyth_core::{ReluNetwork, SplitSpec, TrainConfig};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| DenseMatrix::new(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn homogeneous_form_matches_explicit_bias(
        dims in proptest::collection::vec(1usize..=9, 2..=5),
        seed in any::<u64>(),
        samples in 1usize..=12,
        x_seed in any::<u64>(),
    ) {
        let net = ReluNetwork::init(&dims, seed).unwrap();
        let x = synth_blobs(x_seed, samples, 1, dims[0], 2.0).unwrap();
        let a = forward(&net, x.features()).unwrap();
        let b = forward_homogeneous(&net, x.features()).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (p, q) in la.as_slice().iter().zip(lb.as_slice()) {
                prop_assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()), "{p} vs {q}");
            }
        }
    }

    #[test]
    fn matmul_is_associative((a, b, c) in (1usize..=6, 1usize..=6, 1usize..=6, 1usize..=6)
        .prop_flat_map(|(m, n, k, p)| (matrix(m, n), matrix(n, k), matrix(k, p))))
    {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = a.l1_norm() * b.l1_norm() * c.l1_norm();
        for (p, q) in left.as_slice().iter().zip(right.as_slice()) {
            prop_assert!((p - q).abs() <= 1e-9 * (p.abs().max(q.abs()) + 1e-9 * scale + f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn splits_are_reproducible_partitions(
        seed in any::<u64>(),
        per_class in 1usize..=30,
        classes in 1usize..=4,
        val in 0.0f64..0.4,
    ) {
        // a single sample floors to an empty train split, which is rejected
        prop_assume!(per_class * classes >= 2);
        let ds = synth_blobs(seed, per_class, classes, 3, 0.5).unwrap();
        let spec = SplitSpec { train: 0.5, val, test: 0.5 - val, seed: seed ^ 7 };
        let a = split(&ds, &spec).unwrap();
        let b = split(&ds, &spec).unwrap();
        prop_assert_eq!(&a, &b);
        let sizes = a.train.len()
            + a.val.as_ref().map_or(0, |d| d.len())
            + a.test.as_ref().map_or(0, |d| d.len());
        prop_assert_eq!(sizes, ds.len());
        // every sample lands in exactly one part: compare column multisets
        let mut all: Vec<Vec<u64>> = [Some(&a.train), a.val.as_ref(), a.test.as_ref()]
            .into_iter()
            .flatten()
            .flat_map(|d| (0..d.len()).map(|c| d.features().column(c).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>())
            .collect();
        let mut orig: Vec<Vec<u64>> = (0..ds.len())
            .map(|c| ds.features().column(c).iter().map(|v| v.to_bits()).collect())
            .collect();
        all.sort();
        orig.sort();
        prop_assert_eq!(all, orig);
    }

    #[test]
    fn class_subsets_keep_features_exactly(seed in any::<u64>(), keep in proptest::sample::subsequence(vec![0usize, 1, 2, 3, 4], 1..=5)) {
        let ds = synth_blobs(seed, 4, 5, 2, 0.3).unwrap();
        let sub = subset_classes(&ds, &keep).unwrap();
        prop_assert_eq!(sub.class_count(), keep.len());
        let mut j = 0;
        for c in 0..ds.len() {
            let old = ds.labels()[c];
            if let Some(new) = keep.iter().position(|&k| k == old) {
                prop_assert_eq!(sub.labels()[j], new);
                let a: Vec<u64> = ds.features().column(c).iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = sub.features().column(j).iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
                j += 1;
            }
        }
        prop_assert_eq!(j, sub.len());
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = synth_blobs(3, 30, 3, 4, 0.6).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 8,
        learning_rate: 0.05,
        l1: PerLayer::Scalar(1e-4),
        l2: PerLayer::Scalar(1e-4),
        dropout_keep: PerLayer::Layers(vec![0.8, 1.0]),
        seed: 4,
    };
    let init = ReluNetwork::init(&[4, 10, 3], 8).unwrap();
    let a = train(&init, &data, &cfg).unwrap();
    let b = train(&init, &data, &cfg).unwrap();
    let bits = |n: &ReluNetwork| -> Vec<u64> {
        n.weights().iter().flat_map(|w| w.as_slice().iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.biases(), b.biases());
    assert_ne!(bits(&a), bits(&init));
}
