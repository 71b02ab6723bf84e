//! Checkpoint directories.
//!
//! ```text
//! manifest.json      schema version, seed, epoch, config echo and hash,
//!                    metrics, SHA-256 of every other file
//! backbone.bin       frozen encoder tensors
//! hypernetwork.bin   embedding tables, combiner and heads
//! head.bin           classification head
//! optimizer.bin      Adam moments
//! kernels.txt        the filter bank used for the views
//! train_log.jsonl    one record per finished epoch
//! ```
//!
//! Tensor blobs use the format of [`TensorStore`]. Nothing time-dependent is
//! written, so identical runs give byte-identical directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ClassificationHead};
use crate::error::{Error, Result};
use crate::filterbank::FilterBank;
use crate::hyperlora::{HyperNetwork, NUM_EXPERTS};
use crate::model::{HyperDetModel, ModelConfig, Trainable};
use crate::optim::Adam;
use crate::tensors::{sha256_hex, ParamGroup, TensorStore};
use crate::trainer::EpochRecord;

pub const FORMAT: &str = "hyperdet-checkpoint";
pub const SCHEMA_VERSION: u32 = 1;

pub const MANIFEST: &str = "manifest.json";
pub const BACKBONE: &str = "backbone.bin";
pub const HYPERNETWORK: &str = "hypernetwork.bin";
pub const HEAD: &str = "head.bin";
pub const OPTIMIZER: &str = "optimizer.bin";
pub const KERNELS: &str = "kernels.txt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub schema_version: u32,
    pub seed: u64,
    pub epoch: usize,
    pub steps: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub model: ModelConfig,
    pub metrics: BTreeMap<String, Option<f64>>,
    /// File name to SHA-256.
    pub files: BTreeMap<String, String>,
}

pub struct CheckpointParts<'a> {
    pub model: &'a HyperDetModel,
    pub optimizer: &'a Adam,
    pub bank: &'a FilterBank,
    pub seed: u64,
    pub epoch: usize,
    pub steps: u64,
    /// Effective configuration echoed into the manifest.
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, Option<f64>>,
    pub log: &'a [EpochRecord],
}

pub struct LoadedCheckpoint {
    pub manifest: Manifest,
    pub model: HyperDetModel,
    pub optimizer: Adam,
    pub bank: FilterBank,
    pub log: Vec<EpochRecord>,
    /// SHA-256 of the manifest, which covers every other file.
    pub hash: String,
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<String> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(bytes))
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| Error::io(&path, e))
}

/// Canonical JSON hash of a config echo.
pub fn config_hash(config: &serde_json::Value) -> String {
    sha256_hex(serde_json::to_string(config).expect("json value").as_bytes())
}

/// Writes a checkpoint into `dir` (created if needed) and returns its hash.
pub fn save_checkpoint(dir: impl AsRef<Path>, parts: &CheckpointParts<'_>) -> Result<String> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    let m = parts.model;
    for (name, bytes) in [
        (BACKBONE, m.backbone.to_store().to_bytes()),
        (HYPERNETWORK, m.trainable.hyper.to_store().to_bytes()),
        (HEAD, m.trainable.head.to_store().to_bytes()),
        (OPTIMIZER, parts.optimizer.to_store().to_bytes()),
        (KERNELS, parts.bank.to_text().into_bytes()),
    ] {
        files.insert(name.to_string(), write(dir, name, &bytes)?);
    }
    let mut log = String::new();
    for rec in parts.log {
        log.push_str(&serde_json::to_string(rec)?);
        log.push('\n');
    }
    files.insert(TRAIN_LOG.to_string(), write(dir, TRAIN_LOG, log.as_bytes())?);

    let manifest = Manifest {
        format: FORMAT.into(),
        schema_version: SCHEMA_VERSION,
        seed: parts.seed,
        epoch: parts.epoch,
        steps: parts.steps,
        config_hash: config_hash(&parts.config),
        config: parts.config.clone(),
        model: m.config().clone(),
        metrics: parts.metrics.clone(),
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write(dir, MANIFEST, text.as_bytes())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let bytes = read(dir.as_ref(), MANIFEST)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads and verifies a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let dir = dir.as_ref();
    let manifest_bytes = read(dir, MANIFEST)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.format != FORMAT || manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} v{}",
            dir.display(),
            manifest.format,
            manifest.schema_version
        )));
    }
    let mut blobs = BTreeMap::new();
    for (name, expected) in &manifest.files {
        let bytes = read(dir, name)?;
        let got = sha256_hex(&bytes);
        if &got != expected {
            return Err(Error::Checkpoint(format!("{name}: hash {got} does not match manifest {expected}")));
        }
        blobs.insert(name.as_str(), bytes);
    }
    let blob = |name: &str| -> Result<TensorStore> {
        let bytes = blobs
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("manifest lists no `{name}`")))?;
        TensorStore::from_bytes(bytes)
    };

    let cfg = manifest.model.clone();
    cfg.validate()?;
    let mut backbone = Backbone::zeros(cfg.backbone.clone())?;
    backbone.load_store(&blob(BACKBONE)?)?;
    let mut hyper = HyperNetwork::zeros(
        &cfg.hyper,
        NUM_EXPERTS,
        cfg.backbone.adapted_blocks(),
        cfg.backbone.site_shapes(),
    )?;
    hyper.load_store(&blob(HYPERNETWORK)?)?;
    let mut head = ClassificationHead::zeros(cfg.backbone.feature_dim);
    head.load_store(&blob(HEAD)?)?;
    let trainable = Trainable { hyper, head };
    let optimizer = Adam::from_store(&trainable, &blob(OPTIMIZER)?)?;
    let kernels = blobs
        .get(KERNELS)
        .ok_or_else(|| Error::Checkpoint(format!("manifest lists no `{KERNELS}`")))?;
    let bank = FilterBank::parse(&String::from_utf8_lossy(kernels))?;
    let log = match blobs.get(TRAIN_LOG) {
        Some(bytes) => String::from_utf8_lossy(bytes)
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?,
        None => Vec::new(),
    };
    let model = HyperDetModel::from_parts(cfg, backbone, trainable)?;
    Ok(LoadedCheckpoint {
        manifest,
        model,
        optimizer,
        bank,
        log,
        hash: sha256_hex(&manifest_bytes),
    })
}

/// Every file of a checkpoint directory with its bytes, sorted by name.
pub fn checkpoint_files(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.push((path.file_name().map(PathBuf::from).unwrap_or_default(), bytes));
        }
    }
    out.sort();
    Ok(out)
}
