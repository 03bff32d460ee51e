//! Pools of pruned models, plurality voting, and backward elimination.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{predict, ReluNetwork};
use crate::pruner::{prune_network, PruneConfig, PrunedModel};
use crate::tensor::DenseMatrix;

/// Ordered pruned models derived from one baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPool {
    members: Vec<PrunedModel>,
    baseline_ref: String,
}

impl ModelPool {
    pub fn new(members: Vec<PrunedModel>, baseline_ref: impl Into<String>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("a pool needs at least one member"))?;
        let (dim, classes) = (first.network.input_dim(), first.network.output_classes());
        for (i, m) in members.iter().enumerate() {
            if m.network.input_dim() != dim || m.network.output_classes() != classes {
                return Err(Error::shape(format!(
                    "member {i} maps {} -> {}, pool maps {dim} -> {classes}",
                    m.network.input_dim(),
                    m.network.output_classes()
                )));
            }
        }
        Ok(Self {
            members,
            baseline_ref: baseline_ref.into(),
        })
    }

    pub fn members(&self) -> &[PrunedModel] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn baseline_ref(&self) -> &str {
        &self.baseline_ref
    }

    /// The configs that produced the members, in pool order.
    pub fn grid(&self) -> Vec<&PruneConfig> {
        self.members.iter().map(|m| &m.config).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].network.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.members[0].network.output_classes()
    }

    /// Weight nonzeros per member.
    pub fn member_nnz(&self) -> Vec<usize> {
        self.members.iter().map(PrunedModel::weight_nnz).collect()
    }
}

/// Prunes `baseline` once per config. Configs run concurrently; the pool
/// keeps grid order.
pub fn generate_pool(
    baseline: &ReluNetwork,
    grid: &[PruneConfig],
    data: &Dataset,
    baseline_ref: &str,
) -> Result<ModelPool> {
    if grid.is_empty() {
        return Err(Error::invalid("the pruning grid is empty"));
    }
    let members = grid
        .par_iter()
        .map(|cfg| prune_network(baseline, data, cfg, baseline_ref))
        .collect::<Result<Vec<_>>>()?;
    ModelPool::new(members, baseline_ref)
}

/// Predicted labels, one row per pool member and one column per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteMatrix {
    labels: Vec<Vec<usize>>,
    classes: usize,
}

impl VoteMatrix {
    pub fn new(labels: Vec<Vec<usize>>, classes: usize) -> Result<Self> {
        let samples = labels
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("a vote matrix needs at least one member"))?;
        for (i, row) in labels.iter().enumerate() {
            if row.len() != samples {
                return Err(Error::shape(format!(
                    "member {i} voted on {} samples, expected {samples}",
                    row.len()
                )));
            }
            if let Some(&c) = row.iter().find(|&&c| c >= classes) {
                return Err(Error::invalid(format!(
                    "member {i} voted for class {c} of {classes}"
                )));
            }
        }
        Ok(Self { labels, classes })
    }

    pub fn members(&self) -> usize {
        self.labels.len()
    }

    pub fn samples(&self) -> usize {
        self.labels[0].len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, member: usize) -> &[usize] {
        &self.labels[member]
    }

    pub fn label(&self, member: usize, sample: usize) -> usize {
        self.labels[member][sample]
    }

    /// Fraction of samples each member gets right on its own.
    pub fn standalone_accuracies(&self, truth: &[usize]) -> Result<Vec<f64>> {
        self.check_truth(truth)?;
        Ok(self
            .labels
            .iter()
            .map(|row| {
                fraction(
                    row.iter().zip(truth).filter(|(a, b)| a == b).count(),
                    truth.len(),
                )
            })
            .collect())
    }

    fn check_truth(&self, truth: &[usize]) -> Result<()> {
        if truth.len() != self.samples() {
            return Err(Error::shape(format!(
                "{} labels for {} voted samples",
                truth.len(),
                self.samples()
            )));
        }
        Ok(())
    }
}

fn fraction(count: usize, total: usize) -> f64 {
    count as f64 / total as f64
}

pub fn vote_matrix(pool: &ModelPool, x: &DenseMatrix) -> Result<VoteMatrix> {
    let labels = pool
        .members
        .par_iter()
        .map(|m| predict(&m.network, x))
        .collect::<Result<Vec<_>>>()?;
    VoteMatrix::new(labels, pool.classes())
}

/// A nonempty set of pool indices, kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ensemble {
    member_ids: Vec<usize>,
}

impl Ensemble {
    pub fn new(mut member_ids: Vec<usize>, pool_size: usize) -> Result<Self> {
        if member_ids.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one member"));
        }
        member_ids.sort_unstable();
        if member_ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!(
                "duplicate ensemble members in {member_ids:?}"
            )));
        }
        if let Some(&id) = member_ids.last().filter(|&&id| id >= pool_size) {
            return Err(Error::invalid(format!(
                "member {id} is outside a pool of {pool_size}"
            )));
        }
        Ok(Self { member_ids })
    }

    /// Every member of a pool of `n`.
    pub fn full(n: usize) -> Result<Self> {
        Self::new((0..n).collect(), n)
    }

    pub fn member_ids(&self) -> &[usize] {
        &self.member_ids
    }

    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }

    fn without(&self, id: usize) -> Self {
        Self {
            member_ids: self
                .member_ids
                .iter()
                .copied()
                .filter(|&m| m != id)
                .collect(),
        }
    }
}

/// The class with the most votes among the ensemble's members; ties go to
/// the lowest class index.
pub fn plurality_vote(ensemble: &Ensemble, votes: &VoteMatrix, sample: usize) -> usize {
    let mut counts = vec![0usize; votes.classes()];
    for &m in &ensemble.member_ids {
        counts[votes.label(m, sample)] += 1;
    }
    fuse(&counts)
}

fn fuse(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

pub fn ensemble_accuracy(ensemble: &Ensemble, votes: &VoteMatrix, truth: &[usize]) -> Result<f64> {
    votes.check_truth(truth)?;
    let correct = (0..votes.samples())
        .filter(|&s| plurality_vote(ensemble, votes, s) == truth[s])
        .count();
    Ok(fraction(correct, truth.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EliminationStep {
    pub ensemble: Ensemble,
    /// Accuracy of `ensemble`, measured before the removal.
    pub accuracy: f64,
    pub removed: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EliminationTrace {
    pub steps: Vec<EliminationStep>,
}

/// Greedy backward elimination over the whole pool. Member nonzero counts
/// break accuracy ties.
pub fn backward_eliminate(
    pool: &ModelPool,
    votes: &VoteMatrix,
    truth: &[usize],
) -> Result<EliminationTrace> {
    if votes.members() != pool.len() {
        return Err(Error::shape(format!(
            "{} vote rows for a pool of {}",
            votes.members(),
            pool.len()
        )));
    }
    backward_eliminate_by(votes, truth, &pool.member_nnz())
}

/// Starts from every member and repeatedly drops the one with the lowest
/// standalone accuracy, recording each ensemble's accuracy before the drop.
/// Ties remove the member with more nonzeros (`nnz`), then the higher index.
pub fn backward_eliminate_by(
    votes: &VoteMatrix,
    truth: &[usize],
    nnz: &[usize],
) -> Result<EliminationTrace> {
    let n = votes.members();
    if nnz.len() != n {
        return Err(Error::shape(format!(
            "{} nonzero counts for {n} members",
            nnz.len()
        )));
    }
    let standalone = votes.standalone_accuracies(truth)?;
    let mut current = Ensemble::full(n)?;
    let mut steps = Vec::with_capacity(n);
    loop {
        let accuracy = ensemble_accuracy(&current, votes, truth)?;
        if current.len() == 1 {
            steps.push(EliminationStep {
                ensemble: current,
                accuracy,
                removed: None,
            });
            break;
        }
        let weakest = current
            .member_ids
            .iter()
            .copied()
            .min_by(|&a, &b| {
                standalone[a]
                    .total_cmp(&standalone[b])
                    .then(nnz[b].cmp(&nnz[a]))
                    .then(b.cmp(&a))
            })
            .expect("ensemble is nonempty");
        let next = current.without(weakest);
        steps.push(EliminationStep {
            ensemble: current,
            accuracy,
            removed: Some(weakest),
        });
        current = next;
    }
    Ok(EliminationTrace { steps })
}

impl EliminationTrace {
    /// CSV with columns `step,ensemble_size,accuracy,removed_id,member_ids`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step",
            "ensemble_size",
            "accuracy",
            "removed_id",
            "member_ids",
        ])?;
        for (i, s) in self.steps.iter().enumerate() {
            let ids: Vec<String> = s.ensemble.member_ids.iter().map(usize::to_string).collect();
            w.write_record([
                i.to_string(),
                s.ensemble.len().to_string(),
                s.accuracy.to_string(),
                s.removed.map(|r| r.to_string()).unwrap_or_default(),
                ids.join(";"),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<trace csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Parses what [`write_csv`](Self::write_csv) produced.
    pub fn read_csv<R: std::io::Read>(input: R, pool_size: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut steps = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let bad = |what: &str| Error::Parse {
                line,
                message: format!("bad {what}"),
            };
            if rec.len() != 5 {
                return Err(bad("column count"));
            }
            let accuracy: f64 = rec[2].parse().map_err(|_| bad("accuracy"))?;
            let removed = match &rec[3] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("removed_id"))?),
            };
            let ids = rec[4]
                .split(';')
                .map(|s| s.parse().map_err(|_| bad("member_ids")))
                .collect::<Result<Vec<usize>>>()?;
            steps.push(EliminationStep {
                ensemble: Ensemble::new(ids, pool_size)?,
                accuracy,
                removed,
            });
        }
        Ok(Self { steps })
    }
}

/// The highest-accuracy ensemble on the trace; ties prefer fewer members,
/// then the earlier step.
pub fn best_ensemble(trace: &EliminationTrace) -> Option<(Ensemble, f64)> {
    let mut best: Option<&EliminationStep> = None;
    for s in &trace.steps {
        let better = match best {
            None => true,
            Some(b) => {
                s.accuracy > b.accuracy
                    || (s.accuracy == b.accuracy && s.ensemble.len() < b.ensemble.len())
            }
        };
        if better {
            best = Some(s);
        }
    }
    best.map(|s| (s.ensemble.clone(), s.accuracy))
}

/// Fused labels with members evaluated on `workers` threads. Member
/// predictions land in an index-ordered buffer, so the result does not
/// depend on the worker count.
pub fn predict_parallel(
    ensemble: &Ensemble,
    pool: &ModelPool,
    x: &DenseMatrix,
    workers: usize,
) -> Result<Vec<usize>> {
    if workers == 0 {
        return Err(Error::invalid("workers must be at least 1"));
    }
    if let Some(&id) = ensemble.member_ids.last().filter(|&&id| id >= pool.len()) {
        return Err(Error::invalid(format!(
            "member {id} is outside a pool of {}",
            pool.len()
        )));
    }
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {workers} workers: {e}")))?;
    let rows: Vec<Vec<usize>> = threads.install(|| {
        ensemble
            .member_ids
            .par_iter()
            .map(|&id| predict(&pool.members[id].network, x))
            .collect::<Result<Vec<_>>>()
    })?;
    let classes = pool.classes();
    let mut counts = vec![0usize; classes];
    Ok((0..x.cols())
        .map(|s| {
            counts.fill(0);
            for row in &rows {
                counts[row[s]] += 1;
            }
            fuse(&counts)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn votes(rows: &[&[usize]], classes: usize) -> VoteMatrix {
        VoteMatrix::new(rows.iter().map(|r| r.to_vec()).collect(), classes).unwrap()
    }

    #[test]
    fn single_voter_wins() {
        let v = votes(&[&[2, 0]], 3);
        let e = Ensemble::full(1).unwrap();
        assert_eq!(plurality_vote(&e, &v, 0), 2);
        assert_eq!(plurality_vote(&e, &v, 1), 0);
    }

    #[test]
    fn majority_and_ties() {
        let v = votes(&[&[0], &[0], &[1]], 2);
        assert_eq!(plurality_vote(&Ensemble::full(3).unwrap(), &v, 0), 0);
        let v = votes(&[&[1], &[0]], 2);
        assert_eq!(plurality_vote(&Ensemble::full(2).unwrap(), &v, 0), 0);
        let v = votes(&[&[2], &[1]], 3);
        assert_eq!(plurality_vote(&Ensemble::full(2).unwrap(), &v, 0), 1);
    }

    #[test]
    fn accuracy_of_perfect_and_single_members() {
        let truth = [0, 1, 2, 1];
        let v = votes(&[&truth, &truth, &[0, 0, 0, 0]], 3);
        assert_eq!(
            ensemble_accuracy(&Ensemble::full(3).unwrap(), &v, &truth).unwrap(),
            1.0
        );
        let lone = Ensemble::new(vec![2], 3).unwrap();
        assert_eq!(ensemble_accuracy(&lone, &v, &truth).unwrap(), 0.25);
        assert!(ensemble_accuracy(&lone, &v, &truth[..3]).is_err());
    }

    #[test]
    fn ensemble_validation() {
        assert!(Ensemble::new(vec![], 3).is_err());
        assert!(Ensemble::new(vec![1, 1], 3).is_err());
        assert!(Ensemble::new(vec![3], 3).is_err());
        assert_eq!(Ensemble::new(vec![2, 0], 3).unwrap().member_ids(), &[0, 2]);
    }

    #[test]
    fn vote_matrix_validation() {
        assert!(VoteMatrix::new(vec![], 2).is_err());
        assert!(VoteMatrix::new(vec![vec![0, 1], vec![0]], 2).is_err());
        assert!(VoteMatrix::new(vec![vec![0, 2]], 2).is_err());
    }

    #[test]
    fn elimination_of_one_member() {
        let v = votes(&[&[1, 0]], 2);
        let t = backward_eliminate_by(&v, &[1, 1], &[5]).unwrap();
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.steps[0].removed, None);
        assert_eq!(t.steps[0].accuracy, 0.5);
    }

    #[test]
    fn elimination_ties_prefer_dropping_denser_then_later() {
        let truth = [0, 0];
        let v = votes(&[&[0, 1], &[1, 0], &[0, 1], &[0, 0]], 2);
        // members 0..3 score 0.5, 0.5, 0.5, 1.0
        let t = backward_eliminate_by(&v, &truth, &[10, 30, 10, 1]).unwrap();
        let removed: Vec<_> = t.steps.iter().map(|s| s.removed).collect();
        assert_eq!(removed, vec![Some(1), Some(2), Some(0), None]);
    }

    #[test]
    fn best_prefers_smaller_then_earlier() {
        let step = |ids: Vec<usize>, accuracy| EliminationStep {
            ensemble: Ensemble::new(ids, 9).unwrap(),
            accuracy,
            removed: None,
        };
        let trace = EliminationTrace {
            steps: vec![
                step((0..8).collect(), 0.9),
                step(vec![1, 2, 3], 0.9),
                step(vec![4], 0.5),
            ],
        };
        let (e, acc) = best_ensemble(&trace).unwrap();
        assert_eq!((e.len(), acc), (3, 0.9));
        let trace = EliminationTrace {
            steps: vec![step(vec![0, 1], 0.9), step(vec![3, 4], 0.9)],
        };
        assert_eq!(best_ensemble(&trace).unwrap().0.member_ids(), &[0, 1]);
    }

    #[test]
    fn trace_csv_round_trip() {
        let truth = [0, 1, 1];
        let v = votes(&[&[0, 1, 0], &[1, 1, 1], &[0, 0, 1]], 2);
        let t = backward_eliminate_by(&v, &truth, &[1, 2, 3]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,ensemble_size,accuracy,removed_id,member_ids\n"));
        assert!(text.contains("0;1;2"));
        assert_eq!(EliminationTrace::read_csv(buf.as_slice(), 3).unwrap(), t);
    }
}
