use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{add_bias, check_input, ReluNetwork};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, DenseMatrix};

/// A coefficient given either once for every layer or once per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerLayer {
    Scalar(f64),
    Layers(Vec<f64>),
}

impl PerLayer {
    pub fn resolve(&self, depth: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            PerLayer::Scalar(v) => Ok(vec![*v; depth]),
            PerLayer::Layers(v) if v.len() == depth => Ok(v.clone()),
            PerLayer::Layers(v) => Err(Error::invalid(format!(
                "{what} has {} entries for a {depth}-layer network",
                v.len()
            ))),
        }
    }
}

impl Default for PerLayer {
    fn default() -> Self {
        PerLayer::Scalar(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub l1: PerLayer,
    #[serde(default)]
    pub l2: PerLayer,
    /// Keep probability for each layer's output. The entry for the output
    /// layer is ignored since logits are never dropped.
    #[serde(default = "keep_all")]
    pub dropout_keep: PerLayer,
    #[serde(default)]
    pub seed: u64,
}

fn keep_all() -> PerLayer {
    PerLayer::Scalar(1.0)
}

struct Resolved {
    l1: Vec<f64>,
    l2: Vec<f64>,
    keep: Vec<f64>,
}

impl TrainConfig {
    fn resolve(&self, depth: usize) -> Result<Resolved> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        let l1 = self.l1.resolve(depth, "l1")?;
        let l2 = self.l2.resolve(depth, "l2")?;
        let keep = self.dropout_keep.resolve(depth, "dropout_keep")?;
        if l1.iter().chain(&l2).any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::invalid(
                "regularization coefficients must be finite and >= 0",
            ));
        }
        if keep.iter().any(|k| !(*k > 0.0 && *k <= 1.0)) {
            return Err(Error::invalid(format!(
                "keep probabilities {keep:?} must lie in (0, 1]"
            )));
        }
        Ok(Resolved { l1, l2, keep })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Mean softmax cross-entropy plus `l1·|W|₁ + l2·|W|₂²` per layer, and its
/// gradient. No dropout. The L1 subgradient at zero is zero.
pub fn loss_and_gradient(
    net: &ReluNetwork,
    x: &DenseMatrix,
    labels: &[usize],
    l1: &[f64],
    l2: &[f64],
) -> Result<(f64, Gradients)> {
    check_input(net, x)?;
    check_labels(net, labels, x.cols())?;
    let pass = run_batch(net, x, labels, None)?;
    let mut loss = pass.data_loss;
    let mut grads = pass.grads;
    for (l, w) in net.weights.iter().enumerate() {
        loss += l1[l] * w.l1_norm() + l2[l] * w.as_slice().iter().map(|v| v * v).sum::<f64>();
        add_penalty_gradient(&mut grads.weights[l], w, l1[l], l2[l]);
    }
    Ok((loss, grads))
}

fn add_penalty_gradient(g: &mut DenseMatrix, w: &DenseMatrix, l1: f64, l2: f64) {
    if l1 == 0.0 && l2 == 0.0 {
        return;
    }
    for (gv, &wv) in g.as_mut_slice().iter_mut().zip(w.as_slice()) {
        let sign = if wv > 0.0 {
            1.0
        } else if wv < 0.0 {
            -1.0
        } else {
            0.0
        };
        *gv += l1 * sign + 2.0 * l2 * wv;
    }
}

fn check_labels(net: &ReluNetwork, labels: &[usize], samples: usize) -> Result<()> {
    if labels.len() != samples {
        return Err(Error::shape(format!(
            "{} labels for {samples} samples",
            labels.len()
        )));
    }
    let c = net.output_classes();
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {l} outside [0, {c})")));
    }
    Ok(())
}

struct BatchPass {
    data_loss: f64,
    grads: Gradients,
}

/// Forward and backward over one batch. With `dropout`, hidden outputs are
/// multiplied by an inverted-dropout mask drawn column by column.
fn run_batch(
    net: &ReluNetwork,
    x: &DenseMatrix,
    labels: &[usize],
    dropout: Option<(&[f64], &mut ChaCha8Rng)>,
) -> Result<BatchPass> {
    let depth = net.depth();
    let batch = x.cols();
    let mut pre = Vec::with_capacity(depth);
    let mut acts = vec![x.clone()];
    let mut masks: Vec<Option<DenseMatrix>> = Vec::with_capacity(depth);
    let (keep, mut rng) = match dropout {
        Some((k, r)) => (Some(k), Some(r)),
        None => (None, None),
    };
    for l in 0..depth {
        let mut z = matmul_tn(&net.weights[l], &acts[l])?;
        add_bias(&mut z, &net.biases[l]);
        if l + 1 == depth {
            acts.push(z.clone());
            pre.push(z);
            masks.push(None);
            break;
        }
        let mut a = z.map(|v| if v > 0.0 { v } else { 0.0 });
        let mask = match (keep, rng.as_deref_mut()) {
            (Some(k), Some(r)) if k[l] < 1.0 => {
                let scale = 1.0 / k[l];
                let mut m = DenseMatrix::zeros(a.rows(), a.cols());
                for v in m.as_mut_slice() {
                    *v = if r.random::<f64>() < k[l] { scale } else { 0.0 };
                }
                for (av, mv) in a.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *av *= mv;
                }
                Some(m)
            }
            _ => None,
        };
        acts.push(a);
        pre.push(z);
        masks.push(mask);
    }

    // softmax cross-entropy on the logits
    let logits = &acts[depth];
    let classes = logits.rows();
    let mut delta = DenseMatrix::zeros(classes, batch);
    let mut data_loss = 0.0;
    for p in 0..batch {
        let col = logits.column(p);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = col.iter().map(|v| (v - max).exp()).sum();
        let log_denom = denom.ln();
        data_loss += -(col[labels[p]] - max - log_denom);
        for c in 0..classes {
            let prob = (col[c] - max).exp() / denom;
            let target = if c == labels[p] { 1.0 } else { 0.0 };
            delta[(c, p)] = (prob - target) / batch as f64;
        }
    }
    data_loss /= batch as f64;

    let mut gw = vec![None; depth];
    let mut gb = vec![Vec::new(); depth];
    for l in (0..depth).rev() {
        gw[l] = Some(matmul_nt(&acts[l], &delta)?);
        gb[l] = (0..delta.rows())
            .map(|r| delta.row(r).iter().sum())
            .collect();
        if l == 0 {
            break;
        }
        let mut back = matmul(&net.weights[l], &delta)?;
        let z = &pre[l - 1];
        for (i, bv) in back.as_mut_slice().iter_mut().enumerate() {
            if z.as_slice()[i] <= 0.0 {
                *bv = 0.0;
            }
        }
        if let Some(m) = &masks[l - 1] {
            for (bv, mv) in back.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *bv *= mv;
            }
        }
        delta = back;
    }
    Ok(BatchPass {
        data_loss,
        grads: Gradients {
            weights: gw.into_iter().map(Option::unwrap).collect(),
            biases: gb,
        },
    })
}

/// Mini-batch SGD on softmax cross-entropy with L1/L2 weight penalties and
/// inverted dropout on hidden outputs.
///
/// Shuffling and dropout use separate ChaCha streams derived from
/// `cfg.seed`, so a run is fully reproducible.
pub fn train(net: &ReluNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<ReluNetwork> {
    fit(net, data, cfg, None)
}

/// [`train`] with the weight support frozen: entries where the mask is zero
/// are reset to exactly zero after every update. Biases stay free.
pub fn masked_train(
    net: &ReluNetwork,
    data: &Dataset,
    cfg: &TrainConfig,
    masks: &[DenseMatrix],
) -> Result<ReluNetwork> {
    if masks.len() != net.depth() {
        return Err(Error::shape(format!(
            "{} masks for {} layers",
            masks.len(),
            net.depth()
        )));
    }
    for (l, (m, w)) in masks.iter().zip(net.weights()).enumerate() {
        if m.shape() != w.shape() {
            return Err(Error::shape(format!(
                "mask {} is {:?}, weight is {:?}",
                l + 1,
                m.shape(),
                w.shape()
            )));
        }
    }
    fit(net, data, cfg, Some(masks))
}

fn fit(
    net: &ReluNetwork,
    data: &Dataset,
    cfg: &TrainConfig,
    masks: Option<&[DenseMatrix]>,
) -> Result<ReluNetwork> {
    let depth = net.depth();
    let r = cfg.resolve(depth)?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    check_input(net, data.features())?;
    check_labels(net, data.labels(), data.len())?;

    let mut net = net.clone();
    if cfg.epochs == 0 {
        return Ok(net);
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let use_dropout = r.keep[..depth - 1].iter().any(|&k| k < 1.0);

    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = data.features().select_columns(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&p| data.labels()[p]).collect();
            let dropout = use_dropout.then_some((&r.keep[..], &mut dropout_rng));
            let pass = run_batch(&net, &xb, &yb, dropout)?;
            let mut grads = pass.grads;
            for l in 0..depth {
                add_penalty_gradient(&mut grads.weights[l], &net.weights[l], r.l1[l], r.l2[l]);
                let w = net.weights_mut()[l].as_mut_slice();
                for (wv, gv) in w.iter_mut().zip(grads.weights[l].as_slice()) {
                    *wv -= cfg.learning_rate * gv;
                }
                if let Some(masks) = masks {
                    for (wv, mv) in w.iter_mut().zip(masks[l].as_slice()) {
                        if *mv == 0.0 {
                            *wv = 0.0;
                        }
                    }
                }
                for (bv, gv) in net.biases_mut()[l].iter_mut().zip(&grads.biases[l]) {
                    *bv -= cfg.learning_rate * gv;
                }
            }
        }
        if net.weights.iter().any(|w| !w.is_finite())
            || net.biases.iter().flatten().any(|b| !b.is_finite())
        {
            return Err(Error::invalid("training diverged to a non-finite weight"));
        }
    }
    Ok(net)
}
