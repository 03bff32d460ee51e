//! Datasets: CSV and IDX loaders, seeded Gaussian blobs, splitting and class
//! subsetting.
//!
//! Samples are stored as columns of the feature matrix (`N0 x P`).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DenseMatrix,
    labels: Vec<usize>,
    class_count: usize,
    name: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: DenseMatrix,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if labels.len() != features.cols() {
            return Err(Error::shape(format!(
                "{} labels for {} samples",
                labels.len(),
                features.cols()
            )));
        }
        if class_count == 0 {
            return Err(Error::Data("class count must be at least 1".into()));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Data(format!(
                "sample {i} has label {l}, outside [0, {class_count})"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
            name: name.into(),
        })
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn feature_dim(&self) -> usize {
        self.features.rows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The listed samples, in the given order. `None` when `idx` is empty.
    pub fn select(&self, idx: &[usize], name: impl Into<String>) -> Option<Dataset> {
        if idx.is_empty() {
            return None;
        }
        Some(Dataset {
            features: self.features.select_columns(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            name: name.into(),
        })
    }
}

/// Reads rows of `f0,...,f{d-1},label`.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    parse_csv(&text, has_header, name)
}

pub fn parse_csv(text: &str, has_header: bool, name: impl Into<String>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .from_reader(text.as_bytes());

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 2 {
            return Err(Error::Parse {
                line,
                message: format!(
                    "expected at least one feature and a label, got {} cells",
                    record.len()
                ),
            });
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    line,
                    message: format!("ragged row: {} cells, expected {w}", record.len()),
                })
            }
            _ => {}
        }
        let mut sample = Vec::with_capacity(record.len() - 1);
        for (i, cell) in record.iter().take(record.len() - 1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("feature {i}: `{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("feature {i} is not finite"),
                });
            }
            sample.push(v);
        }
        let cell = record.get(record.len() - 1).unwrap().trim();
        let label: usize = cell.parse().map_err(|_| Error::Parse {
            line,
            message: format!("label `{cell}` is not a nonnegative integer"),
        })?;
        columns.push(sample);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    let class_count = labels.iter().max().unwrap() + 1;
    let features = DenseMatrix::from_columns(&columns)?;
    Dataset::new(name, features, labels, class_count)
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for p in 0..ds.len() {
        let mut row: Vec<String> = ds
            .features
            .column(p)
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        row.push(ds.labels[p].to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    parse_idx(&images, &labels, "idx")
}

fn be_u32(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(at, "truncated idx header"))
}

/// Decodes an IDX image/label pair. Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8], name: impl Into<String>) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("image magic {magic:#010x}, expected 0x00000803"),
        ));
    }
    let count = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("label magic {magic:#010x}, expected 0x00000801"),
        ));
    }
    let label_count = be_u32(labels, 4)? as usize;
    if label_count != count {
        return Err(Error::Data(format!(
            "{count} images but {label_count} labels"
        )));
    }
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::Data("idx file holds no pixels".into()));
    }
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() != count * dim {
        return Err(Error::format(
            16 + pixels.len().min(count * dim),
            format!(
                "expected {} pixel bytes, found {}",
                count * dim,
                pixels.len()
            ),
        ));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != count {
        return Err(Error::format(
            8 + label_bytes.len().min(count),
            format!("expected {count} label bytes, found {}", label_bytes.len()),
        ));
    }
    // transpose: image p becomes column p
    let mut features = vec![0.0; dim * count];
    for (p, image) in pixels.chunks_exact(dim).enumerate() {
        for (i, &b) in image.iter().enumerate() {
            features[i * count + p] = b as f64 / 255.0;
        }
    }
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().unwrap() + 1;
    Dataset::new(
        name,
        DenseMatrix::new(dim, count, features)?,
        labels,
        class_count,
    )
}

/// Isotropic Gaussian blobs. Centroids are drawn uniformly from `[-1, 1]^dim`
/// and each sample adds `spread * N(0, I)` noise. Samples are class-major.
pub fn synth_blobs(
    seed: u64,
    samples_per_class: usize,
    classes: usize,
    dim: usize,
    spread: f64,
) -> Result<Dataset> {
    if samples_per_class == 0 || classes == 0 || dim == 0 {
        return Err(Error::invalid("blob counts must be at least 1"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!(
            "spread {spread} must be finite and >= 0"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let total = samples_per_class * classes;
    let mut features = vec![0.0; dim * total];
    let mut labels = Vec::with_capacity(total);
    for (c, centroid) in centroids.iter().enumerate() {
        for s in 0..samples_per_class {
            let p = c * samples_per_class + s;
            for (i, &mu) in centroid.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                features[i * total + p] = mu + spread * z;
            }
            labels.push(c);
        }
    }
    Dataset::new(
        format!("blobs-{seed}"),
        DenseMatrix::new(dim, total, features)?,
        labels,
        classes,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || self.train <= 0.0 {
            return Err(Error::invalid(format!(
                "split fractions must be >= 0 with train > 0, got {fr:?}"
            )));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions {fr:?} do not sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
}

/// Seeded permutation then a contiguous partition: train and validation
/// sizes are floored, the remainder goes to test.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let p = ds.len();
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    // Guard against 0.7 * 10 flooring to 6 through representation error.
    let floor = |f: f64| ((f * p as f64) + 1e-9).floor() as usize;
    let n_train = floor(spec.train).min(p);
    let n_val = floor(spec.val).min(p - n_train);
    let train = ds
        .select(&order[..n_train], format!("{}-train", ds.name))
        .ok_or_else(|| Error::Data(format!("train split of {p} samples is empty")))?;
    Ok(Splits {
        train,
        val: ds.select(&order[n_train..n_train + n_val], format!("{}-val", ds.name)),
        test: ds.select(&order[n_train + n_val..], format!("{}-test", ds.name)),
    })
}

/// Keeps samples whose label is in `keep`, relabelling `keep[i]` to `i`.
pub fn subset_classes(ds: &Dataset, keep: &[usize]) -> Result<Dataset> {
    if keep.is_empty() {
        return Err(Error::invalid("class subset is empty"));
    }
    let mut remap = vec![None; ds.class_count];
    for (new, &old) in keep.iter().enumerate() {
        if old >= ds.class_count {
            return Err(Error::invalid(format!(
                "class {old} outside [0, {})",
                ds.class_count
            )));
        }
        if remap[old].is_some() {
            return Err(Error::invalid(format!("class {old} listed twice")));
        }
        remap[old] = Some(new);
    }
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&p| remap[ds.labels[p]].is_some())
        .collect();
    let mut out = ds
        .select(&idx, ds.name.clone())
        .ok_or_else(|| Error::Data("class subset selects no samples".into()))?;
    for l in &mut out.labels {
        *l = remap[*l].unwrap();
    }
    out.class_count = keep.len();
    Ok(out)
}
