#![allow(dead_code)]

pub mod oracle;

use ensyth_core::pruner::LayerData;
use ensyth_core::tensor::{matmul_tn, DenseMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A random layer: nonnegative inputs (post-ReLU style, some exact zeros)
/// with a ones row appended, Gaussian weights, and targets produced by the
/// weights themselves. Every neuron fires on at least one sample.
pub fn random_layer(
    seed: u64,
    max_in: usize,
    max_out: usize,
    max_samples: usize,
    hidden: bool,
) -> (DenseMatrix, LayerData) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n_in = rng.random_range(2..=max_in);
        let n_out = rng.random_range(1..=max_out);
        let p = rng.random_range(n_in + 2..=max_samples);
        let x: Vec<f64> = (0..n_in * p)
            .map(|_| {
                let v: f64 = rng.random_range(-0.5..1.5);
                v.max(0.0)
            })
            .collect();
        let x_in = DenseMatrix::new(n_in, p, x).unwrap().append_row(1.0);
        let w: Vec<f64> = (0..(n_in + 1) * n_out)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect::<Vec<f64>>()
            .into_iter()
            .map(|v| 0.5 * v)
            .collect();
        let w_aug = DenseMatrix::new(n_in + 1, n_out, w).unwrap();
        let z = matmul_tn(&w_aug, &x_in).unwrap();
        let x_out = if hidden { z.map(|v| v.max(0.0)) } else { z };
        let active_mask: Vec<bool> = x_out
            .as_slice()
            .iter()
            .map(|&v| !hidden || v > 0.0)
            .collect();
        let every_neuron_fires =
            (0..n_out).all(|m| active_mask[m * p..(m + 1) * p].iter().any(|&a| a));
        if every_neuron_fires {
            return (
                w_aug,
                LayerData {
                    x_in,
                    x_out,
                    active_mask,
                    hidden,
                },
            );
        }
    }
}
