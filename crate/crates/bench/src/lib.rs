//! Seeded fixtures shared by the benchmarks.

use ensyth_core::network::{train, PerLayer};
use ensyth_core::pruner::{collect_layer_data, LayerData};
use ensyth_core::{data, Dataset, DenseMatrix, ReluNetwork, TrainConfig, VoteMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseMatrix::new(rows, cols, v).unwrap()
}

/// Blobs in 16 dimensions, 5 classes.
pub fn blobs(per_class: usize) -> Dataset {
    data::synth_blobs(1, per_class, 5, 16, 0.5).unwrap()
}

/// A `[16, 64, 32, 5]` network briefly trained on [`blobs`].
pub fn trained(ds: &Dataset) -> ReluNetwork {
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        learning_rate: 0.05,
        l1: PerLayer::Scalar(0.0),
        l2: PerLayer::Scalar(0.0),
        dropout_keep: PerLayer::Scalar(1.0),
        seed: 2,
    };
    train(&ReluNetwork::init(&[16, 64, 32, 5], 3).unwrap(), ds, &cfg).unwrap()
}

/// Augmented weights and data of layer `l` of `net` on `ds`.
pub fn layer(net: &ReluNetwork, ds: &Dataset, l: usize) -> (DenseMatrix, LayerData) {
    let data = collect_layer_data(net, ds.features()).unwrap().swap_remove(l);
    (net.augmented_weight(l), data)
}

/// Votes of `members` voters on `samples` samples, each right about 70% of
/// the time against the returned truth.
pub fn votes(members: usize, samples: usize, classes: usize) -> (VoteMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth: Vec<usize> = (0..samples).map(|_| rng.random_range(0..classes)).collect();
    let rows = (0..members)
        .map(|_| {
            truth
                .iter()
                .map(|&t| if rng.random_bool(0.7) { t } else { rng.random_range(0..classes) })
                .collect()
        })
        .collect();
    (VoteMatrix::new(rows, classes).unwrap(), truth)
}
