//! Size and speed measurements of models and ensembles.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{predict, ReluNetwork};
use crate::pool_store::ModelBundle;
use crate::pruner::ZERO_THRESHOLD;
use crate::tensor::DenseMatrix;

/// Nonzero weights plus every bias.
pub fn param_count(net: &ReluNetwork) -> usize {
    weight_nnz(net) + net.bias_count()
}

pub fn weight_nnz(net: &ReluNetwork) -> usize {
    net.weights()
        .iter()
        .map(|w| w.count_nonzero(ZERO_THRESHOLD))
        .sum()
}

/// Fraction of zero weights; biases are not counted.
pub fn sparsity(net: &ReluNetwork) -> f64 {
    1.0 - weight_nnz(net) as f64 / net.weight_capacity() as f64
}

/// Byte length of the serialized archive.
pub fn bundle_size(bundle: &ModelBundle) -> Result<u64> {
    Ok(bundle.to_bytes()?.len() as u64)
}

/// A monotonic time source.
pub trait Clock {
    fn now(&mut self) -> Duration;
}

/// Wall clock measured from construction.
#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock(Instant);

impl MonotonicClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&mut self) -> Duration {
        self.0.elapsed()
    }
}

/// Replays a fixed sequence of readings; panics when it runs out.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClock {
    readings: VecDeque<Duration>,
}

impl ScriptedClock {
    pub fn new(readings: impl IntoIterator<Item = Duration>) -> Self {
        Self {
            readings: readings.into_iter().collect(),
        }
    }

    /// Readings such that consecutive start/stop pairs span `durations`.
    pub fn from_durations(durations: impl IntoIterator<Item = Duration>) -> Self {
        let mut t = Duration::ZERO;
        let mut readings = VecDeque::new();
        for d in durations {
            readings.push_back(t);
            t += d;
            readings.push_back(t);
        }
        Self { readings }
    }

    pub fn remaining(&self) -> usize {
        self.readings.len()
    }
}

impl Clock for ScriptedClock {
    fn now(&mut self) -> Duration {
        self.readings
            .pop_front()
            .expect("scripted clock ran out of readings")
    }
}

/// Exact for whole-microsecond durations.
fn micros(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1e3
}

/// Runs `work` `repeats` times and returns the mean duration in µs. Each
/// run reads the clock once before and once after.
pub fn mean_duration_us<C: Clock + ?Sized>(
    repeats: usize,
    clock: &mut C,
    mut work: impl FnMut() -> Result<()>,
) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let mut total = Duration::ZERO;
    for _ in 0..repeats {
        let start = clock.now();
        work()?;
        total += clock.now().saturating_sub(start);
    }
    Ok(micros(total) / repeats as f64)
}

/// Mean µs to predict `batch` with one model.
pub fn timed_inference<C: Clock + ?Sized>(
    net: &ReluNetwork,
    batch: &DenseMatrix,
    repeats: usize,
    clock: &mut C,
) -> Result<f64> {
    mean_duration_us(repeats, clock, || predict(net, batch).map(drop))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTiming {
    /// Mean over runs of the whole ensemble, members one after another.
    pub total_us: f64,
    /// Mean of the members' own means.
    pub member_mean_us: f64,
    /// Slowest member mean: the critical path when members run in parallel.
    pub max_member_us: f64,
}

/// Times each member separately in index order, then the whole ensemble.
pub fn timed_ensemble_inference<C: Clock + ?Sized>(
    members: &[&ReluNetwork],
    batch: &DenseMatrix,
    repeats: usize,
    clock: &mut C,
) -> Result<EnsembleTiming> {
    if members.is_empty() {
        return Err(Error::invalid("an ensemble needs at least one member"));
    }
    let means = members
        .iter()
        .map(|net| timed_inference(net, batch, repeats, clock))
        .collect::<Result<Vec<_>>>()?;
    let total_us = mean_duration_us(repeats, clock, || {
        for net in members {
            predict(net, batch)?;
        }
        Ok(())
    })?;
    Ok(EnsembleTiming {
        total_us,
        member_mean_us: means.iter().sum::<f64>() / means.len() as f64,
        max_member_us: means.iter().copied().fold(f64::MIN, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub params: usize,
    pub sparsity: f64,
    pub bundle_bytes: u64,
    pub cpu_us: Option<f64>,
    pub accuracy: f64,
}

/// Everything except timing, which callers add separately.
pub fn model_metrics(
    bundle: &ModelBundle,
    net: &ReluNetwork,
    accuracy: f64,
) -> Result<ModelMetrics> {
    Ok(ModelMetrics {
        params: param_count(net),
        sparsity: sparsity(net),
        bundle_bytes: bundle_size(bundle)?,
        cpu_us: None,
        accuracy,
    })
}

/// One line of `pool_metrics.csv`. The baseline row has no set or epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model_id: String,
    pub set_id: Option<String>,
    pub epsilon: Option<f64>,
    pub accuracy: f64,
    pub params: usize,
    pub sparsity: f64,
    pub bundle_bytes: u64,
    pub cpu_us_mean: Option<f64>,
    pub cpu_us_max_member: Option<f64>,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "model_id",
            "set_id",
            "epsilon",
            "accuracy",
            "params",
            "sparsity",
            "bundle_bytes",
            "cpu_us_mean",
            "cpu_us_max_member",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Average ranks, ties sharing the mean of the positions they span.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant or the
/// lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net_with(w: DenseMatrix) -> ReluNetwork {
        let (r, c) = w.shape();
        ReluNetwork::new(vec![r, c], vec![w], vec![vec![0.5; c]]).unwrap()
    }

    #[test]
    fn counts_and_sparsity() {
        let dense = net_with(DenseMatrix::filled(10, 5, 1.0));
        assert_eq!(param_count(&dense), 55);
        assert_eq!(sparsity(&dense), 0.0);
        let zero = net_with(DenseMatrix::zeros(10, 5));
        assert_eq!(param_count(&zero), 5);
        assert_eq!(sparsity(&zero), 1.0);
        let half = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -2.0]]).unwrap();
        assert_eq!(sparsity(&net_with(half)), 0.5);
        let tiny = DenseMatrix::from_rows(&[vec![1e-9, 1.0]]).unwrap();
        assert_eq!(param_count(&net_with(tiny)), 3);
    }

    #[test]
    fn scripted_clock_mean() {
        let mut clock = ScriptedClock::from_durations([10, 20, 30].map(Duration::from_micros));
        let mean = mean_duration_us(3, &mut clock, || Ok(())).unwrap();
        assert_eq!(mean, 20.0);
        assert_eq!(clock.remaining(), 0);
        let mut clock = ScriptedClock::from_durations([Duration::from_micros(7)]);
        assert_eq!(mean_duration_us(1, &mut clock, || Ok(())).unwrap(), 7.0);
        assert!(mean_duration_us(0, &mut clock, || Ok(())).is_err());
    }

    #[test]
    fn ensemble_timing_splits_member_and_total() {
        let a = net_with(DenseMatrix::filled(2, 2, 1.0));
        let batch = DenseMatrix::zeros(2, 3);
        // two members x 2 runs, then 2 runs of the whole ensemble
        let us = [10, 30, 40, 60, 100, 100].map(Duration::from_micros);
        let mut clock = ScriptedClock::from_durations(us);
        let t = timed_ensemble_inference(&[&a, &a], &batch, 2, &mut clock).unwrap();
        assert_eq!(t.member_mean_us, 35.0);
        assert_eq!(t.max_member_us, 50.0);
        assert_eq!(t.total_us, 100.0);
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0]), Some(1.0));
        assert_eq!(spearman(&x, &[9.0, 4.0, 1.0, 0.0]), Some(-1.0));
        assert_eq!(spearman(&x, &[1.0, 1.0, 1.0, 1.0]), None);
        // ranks of y with a tie: 1, 2.5, 2.5, 4
        let r = spearman(&x, &[1.0, 5.0, 5.0, 7.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12, "{r}");
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            MetricsRow {
                model_id: "baseline".into(),
                set_id: None,
                epsilon: None,
                accuracy: 0.75,
                params: 10,
                sparsity: 0.0,
                bundle_bytes: 900,
                cpu_us_mean: Some(12.5),
                cpu_us_max_member: Some(12.5),
            },
            MetricsRow {
                model_id: "0".into(),
                set_id: Some("set1".into()),
                epsilon: Some(0.1),
                accuracy: 0.5,
                params: 4,
                sparsity: 0.6,
                bundle_bytes: 700,
                cpu_us_mean: None,
                cpu_us_max_member: None,
            },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "model_id,set_id,epsilon,accuracy,params,sparsity,bundle_bytes,cpu_us_mean,cpu_us_max_member\n"
        ));
        assert!(text.contains("baseline,,,0.75"));
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), rows);
    }
}
