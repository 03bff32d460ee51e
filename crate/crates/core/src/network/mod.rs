//! Fully connected ReLU classifiers.
//!
//! Layer `l` maps `X(l-1)` (`N(l-1) x P`, samples as columns) to
//! `X(l) = ReLU(W_lᵀ X(l-1) + b_l 1ᵀ)`. The last layer skips the ReLU and
//! its output is the logit matrix.

mod train;

pub use train::{loss_and_gradient, masked_train, train, Gradients, PerLayer, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul_tn, relu, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ReluNetwork {
    layer_dims: Vec<usize>,
    weights: Vec<DenseMatrix>,
    biases: Vec<Vec<f64>>,
}

impl ReluNetwork {
    pub fn new(
        layer_dims: Vec<usize>,
        weights: Vec<DenseMatrix>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::shape("a network needs at least one layer"));
        }
        if layer_dims.contains(&0) {
            return Err(Error::shape(format!("zero-width layer in {layer_dims:?}")));
        }
        let depth = layer_dims.len() - 1;
        if weights.len() != depth || biases.len() != depth {
            return Err(Error::shape(format!(
                "{} weights and {} biases for {depth} layers",
                weights.len(),
                biases.len()
            )));
        }
        for l in 0..depth {
            if weights[l].shape() != (layer_dims[l], layer_dims[l + 1]) {
                return Err(Error::shape(format!(
                    "layer {} weight is {:?}, expected {:?}",
                    l + 1,
                    weights[l].shape(),
                    (layer_dims[l], layer_dims[l + 1])
                )));
            }
            if biases[l].len() != layer_dims[l + 1] {
                return Err(Error::shape(format!(
                    "layer {} bias has length {}, expected {}",
                    l + 1,
                    biases[l].len(),
                    layer_dims[l + 1]
                )));
            }
            if !weights[l].is_finite() || biases[l].iter().any(|b| !b.is_finite()) {
                return Err(Error::invalid(format!(
                    "layer {} holds a non-finite value",
                    l + 1
                )));
            }
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
        })
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::shape(format!("invalid layer dims {layer_dims:?}")));
        }
        let weights = layer_dims
            .windows(2)
            .map(|w| DenseMatrix::zeros(w[0], w[1]))
            .collect();
        let biases = layer_dims[1..].iter().map(|&n| vec![0.0; n]).collect();
        Self::new(layer_dims.to_vec(), weights, biases)
    }

    /// Uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut net.weights {
            let limit = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    /// Rebuilds a network from homogeneous weights (bias as last row).
    pub fn from_augmented(augmented: Vec<DenseMatrix>) -> Result<Self> {
        let mut dims = Vec::with_capacity(augmented.len() + 1);
        let mut weights = Vec::with_capacity(augmented.len());
        let mut biases = Vec::with_capacity(augmented.len());
        for (l, u) in augmented.into_iter().enumerate() {
            let (w, b) = u.split_last_row()?;
            if l == 0 {
                dims.push(w.rows());
            }
            dims.push(w.cols());
            weights.push(w);
            biases.push(b);
        }
        Self::new(dims, weights, biases)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// `[W_l; b_lᵀ]`, shape `(N(l-1) + 1) x N(l)`, for the zero-based layer `l`.
    pub fn augmented_weight(&self, l: usize) -> DenseMatrix {
        self.weights[l]
            .with_row(&self.biases[l])
            .expect("bias length checked at construction")
    }

    pub fn weight_capacity(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.biases.iter().map(Vec::len).sum()
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.weights
    }

    pub(crate) fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }
}

/// Per-layer outputs `X(0) = X, X(1), ..., X(L)`; `X(L)` holds logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub layers: Vec<DenseMatrix>,
}

impl Activations {
    pub fn logits(&self) -> &DenseMatrix {
        self.layers.last().unwrap()
    }
}

fn check_input(net: &ReluNetwork, x: &DenseMatrix) -> Result<()> {
    if x.rows() != net.input_dim() {
        return Err(Error::shape(format!(
            "input has {} rows, network expects {}",
            x.rows(),
            net.input_dim()
        )));
    }
    Ok(())
}

pub(crate) fn add_bias(z: &mut DenseMatrix, b: &[f64]) {
    for (r, &bias) in b.iter().enumerate() {
        for v in z.row_mut(r) {
            *v += bias;
        }
    }
}

pub fn forward(net: &ReluNetwork, x: &DenseMatrix) -> Result<Activations> {
    check_input(net, x)?;
    let mut layers = Vec::with_capacity(net.depth() + 1);
    layers.push(x.clone());
    for l in 0..net.depth() {
        let mut z = matmul_tn(&net.weights[l], &layers[l])?;
        add_bias(&mut z, &net.biases[l]);
        layers.push(if l + 1 < net.depth() { relu(&z) } else { z });
    }
    Ok(Activations { layers })
}

/// Forward pass through `[W; bᵀ]ᵀ [X; 1ᵀ]`, the homogeneous form of
/// [`forward`].
pub fn forward_homogeneous(net: &ReluNetwork, x: &DenseMatrix) -> Result<Activations> {
    check_input(net, x)?;
    let mut layers = vec![x.clone()];
    for l in 0..net.depth() {
        let z = matmul_tn(&net.augmented_weight(l), &layers[l].append_row(1.0))?;
        layers.push(if l + 1 < net.depth() { relu(&z) } else { z });
    }
    Ok(Activations { layers })
}

/// Column-wise argmax; ties go to the lowest index.
pub fn argmax_columns(m: &DenseMatrix) -> Vec<usize> {
    (0..m.cols())
        .map(|p| {
            let mut best = 0;
            for c in 1..m.rows() {
                if m[(c, p)] > m[(best, p)] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn predict(net: &ReluNetwork, x: &DenseMatrix) -> Result<Vec<usize>> {
    Ok(argmax_columns(forward(net, x)?.logits()))
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}
