//! Model bundles: a ZIP archive holding `manifest.json` and one `.ens`
//! stream per array under `arrays/`.
//!
//! Entries are written manifest first, arrays in name order, deflated at
//! level 6 with zeroed timestamps, so equal models give equal bytes apart
//! from `created_at`. The digest is SHA-256 over the manifest without
//! `created_at` followed by every array stream.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::error::{Error, Result};
use crate::network::{ReluNetwork, TrainConfig};
use crate::pruner::{FeasibilityReport, PruneConfig, PrunedModel};
use crate::tensor::{
    decode_array, encode_array_smallest, parse_record, ArrayRecord, DType, DenseMatrix, Encoding,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const BUNDLE_EXTENSION: &str = "ezip";
const MANIFEST_ENTRY: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleKind {
    Baseline,
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: DType,
    pub encoding: Encoding,
    pub dims: Vec<u64>,
    /// Length of the `.ens` stream.
    pub bytes: u64,
}

/// Pruning outcome carried by pruned bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneReport {
    pub layer_epsilons: Vec<f64>,
    pub feasibility: FeasibilityReport,
}

/// Keys serialize in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: BundleKind,
    pub layer_dims: Vec<usize>,
    pub activation: String,
    pub train_config: Option<TrainConfig>,
    pub prune_config: Option<PruneConfig>,
    pub parent_hash: Option<String>,
    pub prune_report: Option<PruneReport>,
    pub arrays: Vec<ArrayEntry>,
    pub created_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub manifest: Manifest,
    /// In manifest order.
    pub arrays: Vec<ArrayRecord>,
}

/// A decoded bundle.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredModel {
    Baseline {
        network: ReluNetwork,
        train_config: Option<TrainConfig>,
    },
    Pruned(PrunedModel),
}

impl StoredModel {
    pub fn network(&self) -> &ReluNetwork {
        match self {
            StoredModel::Baseline { network, .. } => network,
            StoredModel::Pruned(m) => &m.network,
        }
    }
}

fn now_utc() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn layer_arrays(net: &ReluNetwork, masks: Option<&[DenseMatrix]>) -> Result<Vec<ArrayRecord>> {
    let mut arrays = Vec::new();
    for (l, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
        let i = l + 1;
        arrays.push(encode_array_smallest(&format!("W{i}"), w, DType::F64)?);
        let b = DenseMatrix::new(1, b.len(), b.clone())?;
        arrays.push(encode_array_smallest(&format!("b{i}"), &b, DType::F64)?);
        if let Some(m) = masks {
            arrays.push(encode_array_smallest(&format!("M{i}"), &m[l], DType::F64)?);
        }
    }
    arrays.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(arrays)
}

fn index(arrays: &[ArrayRecord]) -> Vec<ArrayEntry> {
    arrays
        .iter()
        .map(|a| ArrayEntry {
            name: a.name.clone(),
            dtype: a.dtype,
            encoding: a.encoding,
            dims: a.dims.clone(),
            bytes: a.bytes.len() as u64,
        })
        .collect()
}

impl ModelBundle {
    pub fn from_network(net: &ReluNetwork, train_config: Option<&TrainConfig>) -> Result<Self> {
        let arrays = layer_arrays(net, None)?;
        Ok(Self {
            manifest: Manifest {
                schema_version: SCHEMA_VERSION,
                kind: BundleKind::Baseline,
                layer_dims: net.layer_dims().to_vec(),
                activation: "relu".into(),
                train_config: train_config.cloned(),
                prune_config: None,
                parent_hash: None,
                prune_report: None,
                arrays: index(&arrays),
                created_at: Some(now_utc()),
            },
            arrays,
        })
    }

    pub fn from_pruned(model: &PrunedModel) -> Result<Self> {
        let arrays = layer_arrays(&model.network, Some(&model.masks))?;
        Ok(Self {
            manifest: Manifest {
                schema_version: SCHEMA_VERSION,
                kind: BundleKind::Pruned,
                layer_dims: model.network.layer_dims().to_vec(),
                activation: "relu".into(),
                train_config: None,
                prune_config: Some(model.config.clone()),
                parent_hash: Some(model.parent_hash.clone()),
                prune_report: Some(PruneReport {
                    layer_epsilons: model.layer_epsilons.clone(),
                    feasibility: model.feasibility.clone(),
                }),
                arrays: index(&arrays),
                created_at: Some(now_utc()),
            },
            arrays,
        })
    }

    /// Hex SHA-256 over the timestamp-free manifest and the array streams.
    pub fn digest(&self) -> Result<String> {
        let mut stable = self.manifest.clone();
        stable.created_at = None;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&stable)?);
        for a in &self.arrays {
            h.update(a.name.as_bytes());
            h.update((a.bytes.len() as u64).to_le_bytes());
            h.update(&a.bytes);
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let opts = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Deflated)
            .compression_level(Some(6))
            .last_modified_time(DateTime::default())
            .unix_permissions(0o644);
        let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
        zip.start_file(MANIFEST_ENTRY, opts)?;
        let manifest = serde_json::to_vec_pretty(&self.manifest)?;
        zip.write_all(&manifest)
            .map_err(|e| Error::io(MANIFEST_ENTRY, e))?;
        for a in &self.arrays {
            let entry = format!("arrays/{}.ens", a.name);
            zip.start_file(entry.as_str(), opts)?;
            zip.write_all(&a.bytes).map_err(|e| Error::io(entry, e))?;
        }
        Ok(zip.finish()?.into_inner())
    }

    /// Parses and validates an archive; `expected_digest` is checked when
    /// given.
    pub fn from_bytes(bytes: &[u8], expected_digest: Option<&str>) -> Result<Self> {
        let mut zip = ZipArchive::new(Cursor::new(bytes))?;
        let mut entries: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for i in 0..zip.len() {
            let mut f = zip.by_index(i)?;
            let name = f.name().to_string();
            let mut buf = Vec::new();
            f.read_to_end(&mut buf)
                .map_err(|e| Error::io(name.clone(), e))?;
            entries.insert(name, buf);
        }
        let manifest_bytes = entries
            .remove(MANIFEST_ENTRY)
            .ok_or_else(|| Error::integrity(MANIFEST_ENTRY, "missing"))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::integrity(MANIFEST_ENTRY, e.to_string()))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::integrity(
                MANIFEST_ENTRY,
                format!("unsupported schema version {}", manifest.schema_version),
            ));
        }

        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in &manifest.arrays {
            let entry = format!("arrays/{}.ens", e.name);
            let raw = entries
                .remove(&entry)
                .ok_or_else(|| Error::integrity(&entry, "listed in the manifest but missing"))?;
            let rec = parse_record(&e.name, raw)
                .map_err(|err| Error::integrity(&entry, err.to_string()))?;
            if rec.dtype != e.dtype
                || rec.encoding != e.encoding
                || rec.dims != e.dims
                || rec.bytes.len() as u64 != e.bytes
            {
                return Err(Error::integrity(
                    &entry,
                    "header disagrees with the manifest",
                ));
            }
            arrays.push(rec);
        }
        if let Some(extra) = entries.keys().next() {
            return Err(Error::integrity(extra, "not listed in the manifest"));
        }
        let bundle = Self { manifest, arrays };
        if let Some(want) = expected_digest {
            let got = bundle.digest()?;
            if !got.eq_ignore_ascii_case(want) {
                return Err(Error::integrity(
                    MANIFEST_ENTRY,
                    format!("digest {got} does not match expected {want}"),
                ));
            }
        }
        bundle.decode()?;
        Ok(bundle)
    }

    fn array(&self, name: &str) -> Result<DenseMatrix> {
        let rec = self
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::integrity(format!("arrays/{name}.ens"), "missing"))?;
        Ok(decode_array(rec)?.into_dense())
    }

    /// Rebuilds the model, checking shapes against `layer_dims`.
    pub fn decode(&self) -> Result<StoredModel> {
        let m = &self.manifest;
        let depth = m.layer_dims.len().saturating_sub(1);
        let expected = depth * if m.kind == BundleKind::Pruned { 3 } else { 2 };
        if depth == 0 || self.arrays.len() != expected {
            return Err(Error::integrity(
                MANIFEST_ENTRY,
                format!(
                    "{} layers need {expected} arrays, found {}",
                    depth,
                    self.arrays.len()
                ),
            ));
        }
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        let mut masks = Vec::new();
        for l in 0..depth {
            let i = l + 1;
            let shape = (m.layer_dims[l], m.layer_dims[l + 1]);
            let w = self.array(&format!("W{i}"))?;
            if w.shape() != shape {
                return Err(Error::integrity(
                    format!("arrays/W{i}.ens"),
                    format!("shape {:?}, manifest implies {shape:?}", w.shape()),
                ));
            }
            let b = self.array(&format!("b{i}"))?;
            if b.shape() != (1, shape.1) {
                return Err(Error::integrity(
                    format!("arrays/b{i}.ens"),
                    format!("shape {:?}, manifest implies {:?}", b.shape(), (1, shape.1)),
                ));
            }
            if m.kind == BundleKind::Pruned {
                let mask = self.array(&format!("M{i}"))?;
                if mask.shape() != shape {
                    return Err(Error::integrity(
                        format!("arrays/M{i}.ens"),
                        format!("shape {:?}, manifest implies {shape:?}", mask.shape()),
                    ));
                }
                let outside = w
                    .as_slice()
                    .iter()
                    .zip(mask.as_slice())
                    .any(|(&v, &k)| v != 0.0 && k == 0.0);
                if mask.as_slice().iter().any(|&k| k != 0.0 && k != 1.0) || outside {
                    return Err(Error::integrity(
                        format!("arrays/M{i}.ens"),
                        "mask is not 0/1 or does not cover the weight support",
                    ));
                }
                masks.push(mask);
            }
            weights.push(w);
            biases.push(b.into_vec());
        }
        let network = ReluNetwork::new(m.layer_dims.clone(), weights, biases)
            .map_err(|e| Error::integrity(MANIFEST_ENTRY, e.to_string()))?;
        match m.kind {
            BundleKind::Baseline => Ok(StoredModel::Baseline {
                network,
                train_config: m.train_config.clone(),
            }),
            BundleKind::Pruned => {
                let missing = |key: &str| {
                    Error::integrity(MANIFEST_ENTRY, format!("pruned bundle without `{key}`"))
                };
                let report = m
                    .prune_report
                    .clone()
                    .ok_or_else(|| missing("prune_report"))?;
                if report.layer_epsilons.len() != depth || report.feasibility.layers.len() != depth
                {
                    return Err(Error::integrity(
                        MANIFEST_ENTRY,
                        format!("prune report does not cover {depth} layers"),
                    ));
                }
                Ok(StoredModel::Pruned(PrunedModel {
                    network,
                    masks,
                    config: m
                        .prune_config
                        .clone()
                        .ok_or_else(|| missing("prune_config"))?,
                    parent_hash: m
                        .parent_hash
                        .clone()
                        .ok_or_else(|| missing("parent_hash"))?,
                    layer_epsilons: report.layer_epsilons,
                    feasibility: report.feasibility,
                }))
            }
        }
    }

    /// Writes the archive and returns its digest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))?;
        self.digest()
    }
}

pub fn save_baseline(
    net: &ReluNetwork,
    train_config: Option<&TrainConfig>,
    path: impl AsRef<Path>,
) -> Result<String> {
    ModelBundle::from_network(net, train_config)?.save(path)
}

pub fn save_pruned(model: &PrunedModel, path: impl AsRef<Path>) -> Result<String> {
    ModelBundle::from_pruned(model)?.save(path)
}

pub fn load_bundle(path: impl AsRef<Path>, expected_digest: Option<&str>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelBundle::from_bytes(&bytes, expected_digest)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<StoredModel> {
    load_bundle(path, None)?.decode()
}
