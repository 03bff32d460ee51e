//! Layer-wise sparsification of a trained ReLU network.
//!
//! Every layer is refit independently against the baseline's own
//! activations: each neuron gets the smallest-L1 weight vector whose
//! outputs stay within a relative tolerance of the original outputs on the
//! samples where it fires, and stay (nearly) non-positive where it does not.
//! The output layer is linear and is refit over all samples.

mod admm;
mod polish;

pub use admm::{AdmmSettings, NeuronOutcome};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{forward, masked_train, PerLayer, ReluNetwork, TrainConfig};
use crate::tensor::{matmul_tn, DenseMatrix};
use admm::{LayerSystem, NeuronTargets};

/// Entries with magnitude below this become exact zeros in the pruned model.
pub const ZERO_THRESHOLD: f64 = 1e-8;

/// Relative tolerance on the reported layer residual.
pub const FEASIBILITY_SLACK: f64 = 1e-3;

/// Relative tolerance on `|U|₁ <= |W|₁`.
pub const OBJECTIVE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub set_id: String,
    pub epsilon_gain: f64,
    #[serde(default)]
    pub l1: PerLayer,
    #[serde(default)]
    pub l2: PerLayer,
    #[serde(default = "keep_all")]
    pub dropout_keep: PerLayer,
    #[serde(default)]
    pub fine_tune_epochs: usize,
    #[serde(default = "default_lr")]
    pub fine_tune_learning_rate: f64,
    #[serde(default = "default_batch")]
    pub fine_tune_batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn keep_all() -> PerLayer {
    PerLayer::Scalar(1.0)
}

fn default_lr() -> f64 {
    0.01
}

fn default_batch() -> usize {
    32
}

impl PruneConfig {
    pub fn new(set_id: impl Into<String>, epsilon_gain: f64) -> Self {
        Self {
            set_id: set_id.into(),
            epsilon_gain,
            l1: PerLayer::Scalar(0.0),
            l2: PerLayer::Scalar(0.0),
            dropout_keep: keep_all(),
            fine_tune_epochs: 0,
            fine_tune_learning_rate: default_lr(),
            fine_tune_batch_size: default_batch(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_gain >= 0.0 && self.epsilon_gain.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon gain {} must be finite and >= 0",
                self.epsilon_gain
            )));
        }
        Ok(())
    }

    fn fine_tune_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.fine_tune_epochs,
            batch_size: self.fine_tune_batch_size,
            learning_rate: self.fine_tune_learning_rate,
            l1: self.l1.clone(),
            l2: self.l2.clone(),
            dropout_keep: self.dropout_keep.clone(),
            seed: self.seed,
        }
    }
}

/// The epsilon values of each hyperparameter set in the reference grid.
pub const GRID_EPSILONS: [f64; 12] = [
    0.01, 0.02, 0.04, 0.06, 0.08, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7,
];

/// The reference 3 x 12 grid for a network of `depth` layers.
///
/// The stock per-layer L2 vectors have five entries. They are aligned
/// to the output end of the network: the last `depth` entries are used,
/// left-padded with zeros when the network is deeper than five layers.
pub fn default_grid(depth: usize) -> Vec<PruneConfig> {
    let align = |v: [f64; 5]| -> PerLayer {
        let mut out = vec![0.0; depth.saturating_sub(5)];
        out.extend_from_slice(&v[5usize.saturating_sub(depth)..]);
        PerLayer::Layers(out)
    };
    let sets = [
        ("set1", PerLayer::Scalar(1.0), 1.0),
        ("set2", align([0.0, 0.0, 0.004, 0.004, 0.0]), 1.0),
        ("set3", align([0.0, 0.0, 0.004, 0.004, 0.004]), 0.5),
    ];
    let mut grid = Vec::with_capacity(36);
    for (set_id, l2, keep) in sets {
        for &eps in &GRID_EPSILONS {
            let mut cfg = PruneConfig::new(set_id, eps);
            cfg.l2 = l2.clone();
            cfg.dropout_keep = PerLayer::Scalar(keep);
            grid.push(cfg);
        }
    }
    grid
}

/// Inputs and targets of one layer on the pruning data.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerData {
    /// `X(l-1)` with a trailing all-ones row, `(N(l-1) + 1) x P`.
    pub x_in: DenseMatrix,
    /// `X(l)` from the baseline, `N(l) x P`.
    pub x_out: DenseMatrix,
    /// Row-major `N(l) x P`; true where `x_out > 0` (all true for the
    /// output layer).
    pub active_mask: Vec<bool>,
    pub hidden: bool,
}

impl LayerData {
    fn is_active(&self, m: usize, p: usize) -> bool {
        self.active_mask[m * self.x_out.cols() + p]
    }

    /// `|X_out|_F` over active entries.
    pub fn active_norm(&self) -> f64 {
        let mut s = 0.0;
        for (v, &a) in self.x_out.as_slice().iter().zip(&self.active_mask) {
            if a {
                s += v * v;
            }
        }
        s.sqrt()
    }
}

pub fn collect_layer_data(net: &ReluNetwork, x: &DenseMatrix) -> Result<Vec<LayerData>> {
    let acts = forward(net, x)?;
    let depth = net.depth();
    Ok((0..depth)
        .map(|l| {
            let x_out = acts.layers[l + 1].clone();
            let hidden = l + 1 < depth;
            let active_mask = x_out
                .as_slice()
                .iter()
                .map(|&v| !hidden || v > 0.0)
                .collect();
            LayerData {
                x_in: acts.layers[l].append_row(1.0),
                x_out,
                active_mask,
                hidden,
            }
        })
        .collect())
}

/// Per-neuron and aggregate solver results for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedLayer {
    /// Solved homogeneous weight, same shape as the input `w_aug`.
    pub u: DenseMatrix,
    pub neurons: Vec<NeuronOutcome>,
}

/// Solves the sparse refit for every neuron of one layer.
///
/// `w_aug` is `[W; bᵀ]`; the last row is treated as the unpenalized bias.
pub fn prune_layer(w_aug: &DenseMatrix, data: &LayerData, eps: f64) -> Result<PrunedLayer> {
    prune_layer_with(w_aug, data, eps, AdmmSettings::default())
}

pub fn prune_layer_with(
    w_aug: &DenseMatrix,
    data: &LayerData,
    eps: f64,
    settings: AdmmSettings,
) -> Result<PrunedLayer> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!(
            "epsilon {eps} must be finite and >= 0"
        )));
    }
    if w_aug.rows() != data.x_in.rows() || w_aug.cols() != data.x_out.rows() {
        return Err(Error::shape(format!(
            "weight {:?} does not match layer data in {:?} / out {:?}",
            w_aug.shape(),
            data.x_in.shape(),
            data.x_out.shape()
        )));
    }
    if data.x_in.cols() != data.x_out.cols()
        || data.active_mask.len() != data.x_out.as_slice().len()
    {
        return Err(Error::shape("layer data sample counts disagree"));
    }
    let system = LayerSystem::new(&data.x_in, settings);
    let p = data.x_out.cols();
    let neurons: Vec<NeuronOutcome> = (0..w_aug.cols())
        .into_par_iter()
        .map(|m| {
            let y = data.x_out.row(m);
            let active = &data.active_mask[m * p..(m + 1) * p];
            let radius = eps
                * y.iter()
                    .zip(active)
                    .filter(|(_, &a)| a)
                    .map(|(v, _)| v * v)
                    .sum::<f64>()
                    .sqrt();
            let targets = NeuronTargets {
                y,
                active,
                radius,
                slack: radius,
                hidden: data.hidden,
            };
            system.solve(&w_aug.column(m), &targets)
        })
        .collect();
    let mut u = DenseMatrix::zeros(w_aug.rows(), w_aug.cols());
    for (m, outcome) in neurons.iter().enumerate() {
        for (i, &v) in outcome.u.iter().enumerate() {
            u[(i, m)] = v;
        }
    }
    Ok(PrunedLayer { u, neurons })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFeasibility {
    /// `|X_out|_F` over active entries.
    pub target_norm: f64,
    /// Layer tolerance `eps · |X_out|_F` over active entries.
    pub epsilon: f64,
    /// `|ReLU(Uᵀ X_in) - X_out|_F` over active entries (linear output for
    /// the last layer).
    pub residual: f64,
    /// Largest `uᵀx - slack` over inactive entries, or 0.
    pub inactive_excess: f64,
    /// `|W|₁` of the baseline layer, bias excluded.
    pub l1_baseline: f64,
    /// `|U|₁` after thresholding, bias excluded.
    pub l1_pruned: f64,
    pub nnz_baseline: usize,
    pub nnz_pruned: usize,
    pub neurons_kept_baseline: usize,
    pub neurons_unconverged: usize,
}

impl LayerFeasibility {
    pub fn residual_ok(&self) -> bool {
        // The floor only matters at zero tolerance, where exact refits still
        // carry roundoff.
        self.residual <= self.epsilon * (1.0 + FEASIBILITY_SLACK) + 1e-10 * (1.0 + self.target_norm)
    }

    pub fn objective_ok(&self) -> bool {
        self.l1_pruned <= self.l1_baseline * (1.0 + OBJECTIVE_SLACK)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub layers: Vec<LayerFeasibility>,
}

impl FeasibilityReport {
    pub fn passes(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.residual_ok() && l.objective_ok())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (l, f) in self.layers.iter().enumerate() {
            if f.neurons_unconverged > 0 {
                out.push(format!(
                    "layer {}: {} neurons hit the iteration limit",
                    l + 1,
                    f.neurons_unconverged
                ));
            }
            if f.neurons_kept_baseline > 0 {
                out.push(format!(
                    "layer {}: {} neurons kept their baseline weights",
                    l + 1,
                    f.neurons_kept_baseline
                ));
            }
        }
        out
    }
}

/// Measures a solved layer against its data and baseline weights.
pub fn layer_feasibility(
    w_aug: &DenseMatrix,
    u_aug: &DenseMatrix,
    data: &LayerData,
    eps: f64,
    neurons: &[NeuronOutcome],
) -> Result<LayerFeasibility> {
    let z = matmul_tn(u_aug, &data.x_in)?;
    let p = z.cols();
    let mut resid_sq = 0.0;
    let mut excess = 0.0f64;
    for m in 0..z.rows() {
        let y = data.x_out.row(m);
        let radius = eps
            * (0..p)
                .filter(|&k| data.is_active(m, k))
                .map(|k| y[k] * y[k])
                .sum::<f64>()
                .sqrt();
        for k in 0..p {
            let zk = z[(m, k)];
            if data.is_active(m, k) {
                let out = if data.hidden { zk.max(0.0) } else { zk };
                resid_sq += (out - y[k]).powi(2);
            } else {
                excess = excess.max(zk - radius);
            }
        }
    }
    let weights_only = |m: &DenseMatrix| m.split_last_row().map(|(w, _)| w);
    let w = weights_only(w_aug)?;
    let u = weights_only(u_aug)?;
    let target_norm = data.active_norm();
    Ok(LayerFeasibility {
        target_norm,
        epsilon: eps * target_norm,
        residual: resid_sq.sqrt(),
        inactive_excess: excess,
        l1_baseline: w.l1_norm(),
        l1_pruned: u.l1_norm(),
        nnz_baseline: w.count_nonzero(ZERO_THRESHOLD),
        nnz_pruned: u.count_nonzero(0.0),
        neurons_kept_baseline: neurons.iter().filter(|n| n.kept_baseline).count(),
        neurons_unconverged: neurons.iter().filter(|n| !n.converged).count(),
    })
}

/// A baseline network after sparsification (and optional fine-tuning).
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel {
    pub network: ReluNetwork,
    /// Per-layer 0/1 matrices with the weight shapes.
    pub masks: Vec<DenseMatrix>,
    pub config: PruneConfig,
    pub parent_hash: String,
    pub layer_epsilons: Vec<f64>,
    pub feasibility: FeasibilityReport,
}

impl PrunedModel {
    pub fn weight_nnz(&self) -> usize {
        self.network
            .weights()
            .iter()
            .map(|w| w.count_nonzero(ZERO_THRESHOLD))
            .sum()
    }
}

/// Sparsifies every layer, extracts masks, and fine-tunes on the frozen
/// support when `cfg.fine_tune_epochs > 0`. The feasibility report
/// describes the model before fine-tuning.
pub fn prune_network(
    net: &ReluNetwork,
    data: &Dataset,
    cfg: &PruneConfig,
    parent_hash: &str,
) -> Result<PrunedModel> {
    prune_network_with(net, data, cfg, parent_hash, AdmmSettings::default())
}

pub fn prune_network_with(
    net: &ReluNetwork,
    data: &Dataset,
    cfg: &PruneConfig,
    parent_hash: &str,
    settings: AdmmSettings,
) -> Result<PrunedModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("pruning set is empty".into()));
    }
    let layers = collect_layer_data(net, data.features())?;
    let eps = cfg.epsilon_gain;

    let solved: Vec<(DenseMatrix, LayerFeasibility)> = layers
        .par_iter()
        .enumerate()
        .map(|(l, ld)| {
            let w_aug = net.augmented_weight(l);
            let solved = prune_layer_with(&w_aug, ld, eps, settings)?;
            let u = threshold_weights(solved.u);
            let report = layer_feasibility(&w_aug, &u, ld, eps, &solved.neurons)?;
            Ok((u, report))
        })
        .collect::<Result<_>>()?;

    let (us, reports): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
    let pruned = ReluNetwork::from_augmented(us)?;
    let masks: Vec<DenseMatrix> = pruned
        .weights()
        .iter()
        .map(|w| w.map(|v| if v != 0.0 { 1.0 } else { 0.0 }))
        .collect();
    let network = if cfg.fine_tune_epochs > 0 {
        masked_train(&pruned, data, &cfg.fine_tune_config(), &masks)?
    } else {
        pruned
    };
    Ok(PrunedModel {
        network,
        masks,
        config: cfg.clone(),
        parent_hash: parent_hash.to_string(),
        layer_epsilons: reports.iter().map(|r| r.epsilon).collect(),
        feasibility: FeasibilityReport { layers: reports },
    })
}

/// Zeros weight entries below [`ZERO_THRESHOLD`]; the bias row is left alone.
fn threshold_weights(mut u: DenseMatrix) -> DenseMatrix {
    let bias_row = u.rows() - 1;
    for r in 0..bias_row {
        for v in u.row_mut(r) {
            if v.abs() < ZERO_THRESHOLD {
                *v = 0.0;
            }
        }
    }
    u
}
