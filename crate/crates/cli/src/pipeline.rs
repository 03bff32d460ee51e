//! Pipeline stages. Every stage reads its inputs from files, so any of them
//! can resume from an earlier run's artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use ensyth_core::data::{self, Splits};
use ensyth_core::ensemble::{self, backward_eliminate, best_ensemble, predict_parallel, vote_matrix};
use ensyth_core::metrics::{self, MetricsRow};
use ensyth_core::network::{self, accuracy, predict};
use ensyth_core::pool_store::{self, ModelBundle, StoredModel};
use ensyth_core::{Dataset, EliminationTrace, ModelPool, MonotonicClock, PrunedModel, ReluNetwork};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, EvalSplit, ExperimentConfig};
use crate::report::accuracy_vs_size_svg;
use crate::seeds::child_seed;
use crate::{CliError, StageExt};

/// File names inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn baseline(&self) -> PathBuf {
        self.root.join("baseline.ezip")
    }

    pub fn pool_dir(&self) -> PathBuf {
        self.root.join("pool")
    }

    pub fn pool_index(&self) -> PathBuf {
        self.pool_dir().join("index.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("pool_metrics.csv")
    }

    pub fn trace(&self) -> PathBuf {
        self.root.join("elimination_trace.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn svg(&self) -> PathBuf {
        self.root.join("accuracy_vs_size.svg")
    }

    pub fn ensemble_timing(&self) -> PathBuf {
        self.root.join("ensemble_timing.json")
    }
}

fn member_file(id: usize) -> String {
    format!("member_{id:03}.ezip")
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(
    workers: usize,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    if workers == 0 {
        return Err(CliError::Config("at `--workers`: must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .stage("setup")?
        .install(f)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let ds = match &cfg.dataset.source {
        DatasetSource::Csv { path, has_header } => data::load_csv(path, *has_header),
        DatasetSource::Idx { images, labels } => data::load_idx(images, labels),
        DatasetSource::Blobs {
            samples_per_class,
            classes,
            dim,
            spread,
        } => data::synth_blobs(
            child_seed(cfg.seed, "data", 0),
            *samples_per_class,
            *classes,
            *dim,
            *spread,
        ),
    }
    .stage("data")?;
    match &cfg.dataset.keep_classes {
        Some(keep) => data::subset_classes(&ds, keep).stage("data"),
        None => Ok(ds),
    }
}

/// Loads, subsets and splits the data, and checks it against the network
/// shape.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits, CliError> {
    let ds = load_dataset(cfg)?;
    let dims = &cfg.network.layer_dims;
    let (input, classes) = (dims[0], dims[dims.len() - 1]);
    if input != ds.feature_dim() || classes != ds.class_count() {
        return Err(CliError::Config(format!(
            "at `network.layer_dims`: {dims:?} does not fit {} features and {} classes",
            ds.feature_dim(),
            ds.class_count()
        )));
    }
    data::split(&ds, &cfg.split_spec()).stage("data")
}

fn split_of<'a>(splits: &'a Splits, which: EvalSplit, stage: &'static str) -> Result<&'a Dataset, CliError> {
    let ds = match which {
        EvalSplit::Val => splits.val.as_ref(),
        EvalSplit::Test => splits.test.as_ref(),
    };
    ds.ok_or_else(|| CliError::Stage {
        stage,
        message: format!("the {} split has no samples", which.as_str()),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: &'static str) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).stage(stage)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Stage {
        stage,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Stage {
        stage,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Stage {
        stage,
        message: format!("{}: {e}", path.display()),
    })
}

fn create_dir(path: &Path, stage: &'static str) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Stage {
        stage,
        message: format!("cannot create {}: {e}", path.display()),
    })
}

/// Trains the baseline from its seeded initialisation and saves it.
/// Returns the bundle digest.
pub fn train_stage(cfg: &ExperimentConfig, splits: &Splits, layout: &Layout) -> Result<String, CliError> {
    let init = ReluNetwork::init(&cfg.network.layer_dims, child_seed(cfg.seed, "init", 0)).stage("train")?;
    let tc = cfg.train_config();
    let net = network::train(&init, &splits.train, &tc).stage("train")?;
    create_dir(layout.root(), "train")?;
    pool_store::save_baseline(&net, Some(&tc), layout.baseline()).stage("train")
}

pub struct LoadedBaseline {
    pub network: ReluNetwork,
    pub bundle: ModelBundle,
    pub digest: String,
}

pub fn load_baseline(path: &Path, stage: &'static str) -> Result<LoadedBaseline, CliError> {
    let bundle = pool_store::load_bundle(path, None).stage(stage)?;
    let digest = bundle.digest().stage(stage)?;
    match bundle.decode().stage(stage)? {
        StoredModel::Baseline { network, .. } => Ok(LoadedBaseline {
            network,
            bundle,
            digest,
        }),
        StoredModel::Pruned(_) => Err(CliError::Stage {
            stage,
            message: format!("{} holds a pruned model, not a baseline", path.display()),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: usize,
    /// Relative to the index file.
    pub file: String,
    pub digest: String,
    pub set_id: String,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolIndex {
    pub baseline_digest: String,
    pub members: Vec<PoolEntry>,
}

pub struct LoadedPool {
    pub index: PoolIndex,
    pub pool: ModelPool,
    pub bundles: Vec<ModelBundle>,
}

/// Loads every member listed in the index, verifying each digest.
pub fn load_pool(index_path: &Path, stage: &'static str) -> Result<LoadedPool, CliError> {
    let index: PoolIndex = read_json(index_path, stage)?;
    let dir = index_path.parent().unwrap_or(Path::new("."));
    let mut bundles = Vec::with_capacity(index.members.len());
    let mut members = Vec::with_capacity(index.members.len());
    for (i, e) in index.members.iter().enumerate() {
        if e.id != i {
            return Err(CliError::Stage {
                stage,
                message: format!("pool index lists id {} at position {i}", e.id),
            });
        }
        let bundle = pool_store::load_bundle(dir.join(&e.file), Some(&e.digest)).stage(stage)?;
        match bundle.decode().stage(stage)? {
            StoredModel::Pruned(m) => members.push(m),
            StoredModel::Baseline { .. } => {
                return Err(CliError::Stage {
                    stage,
                    message: format!("{} is not a pruned model", e.file),
                })
            }
        }
        bundles.push(bundle);
    }
    let pool = ModelPool::new(members, index.baseline_digest.clone()).stage(stage)?;
    Ok(LoadedPool { index, pool, bundles })
}

fn metrics_row(
    model_id: String,
    bundle: &ModelBundle,
    net: &ReluNetwork,
    pruned: Option<&PrunedModel>,
    eval: &Dataset,
) -> Result<MetricsRow, CliError> {
    let acc = accuracy(&predict(net, eval.features()).stage("pool")?, eval.labels());
    let m = metrics::model_metrics(bundle, net, acc).stage("pool")?;
    Ok(MetricsRow {
        model_id,
        set_id: pruned.map(|p| p.config.set_id.clone()),
        epsilon: pruned.map(|p| p.config.epsilon_gain),
        accuracy: m.accuracy,
        params: m.params,
        sparsity: m.sparsity,
        bundle_bytes: m.bundle_bytes,
        cpu_us_mean: None,
        cpu_us_max_member: None,
    })
}

/// Prunes the baseline once per grid entry on the training split, saves
/// every member and the pool index, and writes `pool_metrics.csv` with the
/// baseline row first. Accuracies are measured on the elimination split.
pub fn pool_stage(
    cfg: &ExperimentConfig,
    splits: &Splits,
    baseline_path: &Path,
    layout: &Layout,
) -> Result<PoolIndex, CliError> {
    let base = load_baseline(baseline_path, "pool")?;
    let grid = cfg.prune_grid();
    let pool = ensemble::generate_pool(&base.network, &grid, &splits.train, &base.digest).stage("pool")?;
    let eval = split_of(splits, cfg.elimination.split, "pool")?;

    create_dir(&layout.pool_dir(), "pool")?;
    let mut rows = vec![metrics_row("baseline".into(), &base.bundle, &base.network, None, eval)?];
    let mut entries = Vec::with_capacity(pool.len());
    for (id, m) in pool.members().iter().enumerate() {
        let bundle = ModelBundle::from_pruned(m).stage("pool")?;
        let file = member_file(id);
        let digest = bundle.save(layout.pool_dir().join(&file)).stage("pool")?;
        rows.push(metrics_row(id.to_string(), &bundle, &m.network, Some(m), eval)?);
        entries.push(PoolEntry {
            id,
            file,
            digest,
            set_id: m.config.set_id.clone(),
            epsilon: m.config.epsilon_gain,
        });
    }
    let index = PoolIndex {
        baseline_digest: base.digest,
        members: entries,
    };
    write_json(&layout.pool_index(), &index, "pool")?;
    write_metrics(&layout.metrics(), &rows, "pool")?;
    Ok(index)
}

fn write_metrics(path: &Path, rows: &[MetricsRow], stage: &'static str) -> Result<(), CliError> {
    let mut buf = Vec::new();
    metrics::write_metrics_csv(rows, &mut buf).stage(stage)?;
    fs::write(path, buf).map_err(|e| CliError::Stage {
        stage,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

/// Everything in `summary.json`. Contains no timings, so repeated runs with
/// one seed produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub master_seed: u64,
    pub eval_split: EvalSplit,
    pub baseline_digest: String,
    pub baseline_accuracy: f64,
    pub pool_size: usize,
    pub best_ensemble: Vec<usize>,
    pub best_accuracy: f64,
    pub member_count: usize,
    /// Best ensemble and baseline on the test split, when elimination ran
    /// on validation data and a test split exists.
    pub best_test_accuracy: Option<f64>,
    pub baseline_test_accuracy: Option<f64>,
    pub baseline_weight_nnz: usize,
    pub pool_mean_weight_nnz: f64,
    pub all_members_feasible: bool,
    pub params_never_above_baseline: bool,
}

/// Votes every member on the elimination split, runs backward
/// elimination, and writes the trace and `summary.json`.
pub fn eliminate_stage(
    cfg: &ExperimentConfig,
    splits: &Splits,
    baseline_path: &Path,
    index_path: &Path,
    layout: &Layout,
    workers: usize,
) -> Result<Summary, CliError> {
    let stage = "eliminate";
    let base = load_baseline(baseline_path, stage)?;
    let loaded = load_pool(index_path, stage)?;
    if loaded.index.baseline_digest != base.digest {
        return Err(CliError::Stage {
            stage,
            message: "the pool was pruned from a different baseline".into(),
        });
    }
    let pool = &loaded.pool;
    let which = cfg.elimination.split;
    let eval = split_of(splits, which, stage)?;
    let baseline_accuracy = accuracy(&predict(&base.network, eval.features()).stage(stage)?, eval.labels());
    let votes = vote_matrix(pool, eval.features()).stage(stage)?;
    let trace = backward_eliminate(pool, &votes, eval.labels()).stage(stage)?;
    create_dir(layout.root(), stage)?;
    trace.save_csv(layout.trace()).stage(stage)?;
    let (best, best_accuracy) = best_ensemble(&trace).ok_or_else(|| CliError::Stage {
        stage,
        message: "empty elimination trace".into(),
    })?;

    let test = match which {
        EvalSplit::Val => splits.test.as_ref(),
        EvalSplit::Test => None,
    };
    let (best_test_accuracy, baseline_test_accuracy) = match test {
        Some(t) => {
            let fused = predict_parallel(&best, pool, t.features(), workers).stage(stage)?;
            let base_pred = predict(&base.network, t.features()).stage(stage)?;
            (
                Some(accuracy(&fused, t.labels())),
                Some(accuracy(&base_pred, t.labels())),
            )
        }
        None => (None, None),
    };

    let nnz = pool.member_nnz();
    let base_params = metrics::param_count(&base.network);
    let summary = Summary {
        master_seed: cfg.seed,
        eval_split: which,
        baseline_digest: base.digest,
        baseline_accuracy,
        pool_size: pool.len(),
        member_count: best.len(),
        best_ensemble: best.member_ids().to_vec(),
        best_accuracy,
        best_test_accuracy,
        baseline_test_accuracy,
        baseline_weight_nnz: metrics::weight_nnz(&base.network),
        pool_mean_weight_nnz: nnz.iter().sum::<usize>() as f64 / nnz.len() as f64,
        all_members_feasible: pool.members().iter().all(|m| m.feasibility.passes()),
        params_never_above_baseline: pool
            .members()
            .iter()
            .all(|m| metrics::param_count(&m.network) <= base_params),
    };
    write_json(&layout.summary(), &summary, stage)?;
    Ok(summary)
}

/// Seeded sample of `batch` distinct indices out of `len` (all of them when
/// `batch >= len`).
pub fn bench_sample(len: usize, batch: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, len, batch.min(len)).into_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleBench {
    pub member_ids: Vec<usize>,
    pub repeats: usize,
    pub sample_indices: Vec<usize>,
    pub total_us: f64,
    pub member_mean_us: f64,
    pub max_member_us: f64,
}

/// Times each model on a seeded sample of the test split (the elimination
/// split when there is no test split), one model at a time, and fills the
/// cpu columns of `pool_metrics.csv`. With a trace present, also times the
/// best ensemble.
pub fn bench_stage(
    cfg: &ExperimentConfig,
    splits: &Splits,
    baseline_path: &Path,
    index_path: &Path,
    layout: &Layout,
) -> Result<(), CliError> {
    let stage = "bench";
    let base = load_baseline(baseline_path, stage)?;
    let loaded = load_pool(index_path, stage)?;
    let ds = match splits.test.as_ref() {
        Some(t) => t,
        None => split_of(splits, cfg.elimination.split, stage)?,
    };
    let b = cfg.bench;
    let idx = bench_sample(ds.len(), b.batch_size, b.sample_seed);
    let batch = ds
        .select(&idx, "bench")
        .ok_or_else(|| CliError::Stage {
            stage,
            message: "bench sample is empty".into(),
        })?
        .features()
        .clone();

    let mut clock = MonotonicClock::new();
    let base_us = metrics::timed_inference(&base.network, &batch, b.repeats, &mut clock).stage(stage)?;
    let member_us = loaded
        .pool
        .members()
        .iter()
        .map(|m| metrics::timed_inference(&m.network, &batch, b.repeats, &mut clock))
        .collect::<ensyth_core::Result<Vec<_>>>()
        .stage(stage)?;

    let path = layout.metrics();
    let file = fs::File::open(&path).map_err(|e| CliError::Stage {
        stage,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut rows = metrics::read_metrics_csv(file).stage(stage)?;
    for row in &mut rows {
        let us = match row.model_id.as_str() {
            "baseline" => Some(base_us),
            id => id.parse::<usize>().ok().and_then(|i| member_us.get(i).copied()),
        };
        if let Some(us) = us {
            row.cpu_us_mean = Some(us);
            row.cpu_us_max_member = Some(us);
        }
    }
    write_metrics(&path, &rows, stage)?;

    if layout.trace().exists() {
        let trace = read_trace(layout, loaded.pool.len(), stage)?;
        if let Some((best, _)) = best_ensemble(&trace) {
            let nets: Vec<&ReluNetwork> = best
                .member_ids()
                .iter()
                .map(|&i| &loaded.pool.members()[i].network)
                .collect();
            let t = metrics::timed_ensemble_inference(&nets, &batch, b.repeats, &mut clock).stage(stage)?;
            let out = EnsembleBench {
                member_ids: best.member_ids().to_vec(),
                repeats: b.repeats,
                sample_indices: idx,
                total_us: t.total_us,
                member_mean_us: t.member_mean_us,
                max_member_us: t.max_member_us,
            };
            write_json(&layout.ensemble_timing(), &out, stage)?;
        }
    }
    Ok(())
}

fn read_trace(layout: &Layout, pool_size: usize, stage: &'static str) -> Result<EliminationTrace, CliError> {
    let path = layout.trace();
    let file = fs::File::open(&path).map_err(|e| CliError::Stage {
        stage,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    EliminationTrace::read_csv(file, pool_size).stage(stage)
}

/// Renders `accuracy_vs_size.svg` from the trace and summary on disk.
pub fn report_stage(layout: &Layout) -> Result<(), CliError> {
    let stage = "report";
    let summary: Summary = read_json(&layout.summary(), stage)?;
    let trace = read_trace(layout, summary.pool_size, stage)?;
    let svg = accuracy_vs_size_svg(&trace, summary.baseline_accuracy);
    fs::write(layout.svg(), svg).map_err(|e| CliError::Stage {
        stage,
        message: format!("cannot write {}: {e}", layout.svg().display()),
    })
}

/// Train, prune, eliminate, bench, report.
pub fn run_pipeline(cfg: &ExperimentConfig, layout: &Layout, workers: usize) -> Result<Summary, CliError> {
    let splits = load_splits(cfg)?;
    train_stage(cfg, &splits, layout)?;
    pool_stage(cfg, &splits, &layout.baseline(), layout)?;
    let summary = eliminate_stage(cfg, &splits, &layout.baseline(), &layout.pool_index(), layout, workers)?;
    bench_stage(cfg, &splits, &layout.baseline(), &layout.pool_index(), layout)?;
    report_stage(layout)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_sample_is_seeded_and_distinct() {
        let a = bench_sample(200, 50, 4);
        assert_eq!(a, bench_sample(200, 50, 4));
        assert_ne!(a, bench_sample(200, 50, 5));
        let mut s = a.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 50);
        assert_eq!(bench_sample(3, 50, 0).len(), 3);
    }
}
