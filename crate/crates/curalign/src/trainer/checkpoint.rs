//! Checkpoint directories: tensors as raw little-endian f64 archives with
//! JSON manifests, sampler and trainer state as JSON, plus the training log.
//!
//! Layout: `params.bin` + `params.json`, `opt.bin` + `opt.json`,
//! `sampler.json`, `trainer.json`, `log.csv`. Every file is written
//! deterministically so byte comparison of two checkpoint directories is a
//! meaningful equality check.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerKind, OptimizerState, TrainConfig};
use crate::aligner::{AlignerParams, Vocab};
use crate::mat::Mat;
use crate::sampler::SamplerState;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the companion .bin file.
    pub offset: u64,
    /// Element count, always rows * cols.
    pub len: usize,
}

fn write_archive(path: &Path, tensors: &[(&str, &Mat)]) -> Result<Vec<TensorEntry>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut bytes: Vec<u8> = Vec::new();
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: (*name).to_string(),
            rows: m.rows,
            cols: m.cols,
            offset: bytes.len() as u64,
            len: m.data.len(),
        });
        for v in &m.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(entries)
}

fn read_archive(path: &Path, entries: &[TensorEntry]) -> Result<Vec<Mat>> {
    let bytes = fs::read(path)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.len != e.rows * e.cols {
            return Err(Error::Checkpoint(format!(
                "tensor {} claims {} elements for shape {}x{}",
                e.name, e.len, e.rows, e.cols
            )));
        }
        let start = e.offset as usize;
        let end = start.checked_add(e.len * 8).filter(|&end| end <= bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!(
                "tensor {} overruns {}",
                e.name,
                path.display()
            )));
        };
        let mut m = Mat::zeros(e.rows, e.cols);
        for (i, chunk) in bytes[start..end].chunks_exact(8).enumerate() {
            m.data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        out.push(m);
    }
    Ok(out)
}

fn check_format(dtype: &str, byte_order: &str, version: u32, what: &str) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{what} has unsupported version {version}"
        )));
    }
    if dtype != "f64" || byte_order != "little" {
        return Err(Error::Checkpoint(format!(
            "{what} expects f64 little-endian tensors, got {dtype}/{byte_order}"
        )));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsManifest {
    version: u32,
    dtype: String,
    byte_order: String,
    d_in: usize,
    dim: usize,
    use_context: bool,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub fn write_params(dir: &Path, params: &AlignerParams) -> Result<()> {
    let tensors = write_archive(&dir.join("params.bin"), &params.tensors())?;
    let manifest = ParamsManifest {
        version: FORMAT_VERSION,
        dtype: "f64".into(),
        byte_order: "little".into(),
        d_in: params.feature_dim(),
        dim: params.dim(),
        use_context: params.use_context,
        vocab: params.vocab.tokens().to_vec(),
        tensors,
    };
    write_json(&dir.join("params.json"), &manifest)
}

pub fn read_params(dir: &Path) -> Result<AlignerParams> {
    let manifest: ParamsManifest = read_json(&dir.join("params.json"))?;
    check_format(&manifest.dtype, &manifest.byte_order, manifest.version, "params.json")?;
    let names: Vec<&str> = manifest.tensors.iter().map(|e| e.name.as_str()).collect();
    if names != ["embed", "proj", "wq", "wk", "wv"] {
        return Err(Error::Checkpoint(format!(
            "params.json lists tensors {names:?}"
        )));
    }
    let vocab = Vocab::from_tokens(manifest.vocab.clone());
    if vocab.tokens() != manifest.vocab.as_slice() {
        return Err(Error::Checkpoint(
            "params.json vocab is not sorted and deduplicated".into(),
        ));
    }
    let mut mats = read_archive(&dir.join("params.bin"), &manifest.tensors)?;
    let wv = mats.pop().unwrap();
    let wk = mats.pop().unwrap();
    let wq = mats.pop().unwrap();
    let proj = mats.pop().unwrap();
    let embed = mats.pop().unwrap();
    let shapes_ok = embed.rows == vocab.len()
        && embed.cols == manifest.dim
        && proj.rows == manifest.d_in
        && proj.cols == manifest.dim
        && [&wq, &wk, &wv]
            .iter()
            .all(|m| m.rows == manifest.dim && m.cols == manifest.dim);
    if !shapes_ok {
        return Err(Error::Checkpoint("params.bin shapes disagree with manifest".into()));
    }
    Ok(AlignerParams {
        vocab,
        embed,
        proj,
        wq,
        wk,
        wv,
        use_context: manifest.use_context,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct OptManifest {
    version: u32,
    dtype: String,
    byte_order: String,
    kind: OptimizerKind,
    step: u64,
    tensors: Vec<TensorEntry>,
}

pub fn write_optimizer(dir: &Path, opt: &OptimizerState) -> Result<()> {
    let mut named: Vec<(String, &Mat)> = Vec::new();
    for (prefix, mats) in [("m", &opt.m), ("v", &opt.v)] {
        for (i, m) in mats.iter().enumerate() {
            named.push((format!("{prefix}.{}", super::TENSOR_NAMES[i]), m));
        }
    }
    let borrowed: Vec<(&str, &Mat)> = named.iter().map(|(n, m)| (n.as_str(), *m)).collect();
    let tensors = write_archive(&dir.join("opt.bin"), &borrowed)?;
    let manifest = OptManifest {
        version: FORMAT_VERSION,
        dtype: "f64".into(),
        byte_order: "little".into(),
        kind: opt.kind,
        step: opt.step,
        tensors,
    };
    write_json(&dir.join("opt.json"), &manifest)
}

pub fn read_optimizer(dir: &Path) -> Result<OptimizerState> {
    let manifest: OptManifest = read_json(&dir.join("opt.json"))?;
    check_format(&manifest.dtype, &manifest.byte_order, manifest.version, "opt.json")?;
    let expected: Vec<String> = match manifest.kind {
        OptimizerKind::Sgd => Vec::new(),
        OptimizerKind::Adam => ["m", "v"]
            .iter()
            .flat_map(|p| super::TENSOR_NAMES.iter().map(move |n| format!("{p}.{n}")))
            .collect(),
    };
    let names: Vec<&str> = manifest.tensors.iter().map(|e| e.name.as_str()).collect();
    if names != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Checkpoint(format!("opt.json lists tensors {names:?}")));
    }
    let mut mats = read_archive(&dir.join("opt.bin"), &manifest.tensors)?;
    let v = mats.split_off(mats.len() / 2);
    Ok(OptimizerState {
        kind: manifest.kind,
        step: manifest.step,
        m: mats,
        v,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerManifest {
    version: u32,
    step: u64,
    dataset_len: usize,
    dataset_digest: String,
    holdout: Vec<usize>,
    config: TrainConfig,
}

/// Everything needed to continue a run, as read back from disk.
#[derive(Debug)]
pub struct CheckpointBundle {
    pub params: AlignerParams,
    pub optimizer: OptimizerState,
    pub sampler: SamplerState,
    pub step: u64,
    pub dataset_len: usize,
    pub dataset_digest: String,
    pub holdout: Vec<usize>,
    pub config: TrainConfig,
    pub log: String,
}

#[allow(clippy::too_many_arguments)]
pub fn write_checkpoint(
    dir: &Path,
    params: &AlignerParams,
    opt: &OptimizerState,
    sampler: &SamplerState,
    step: u64,
    dataset_len: usize,
    dataset_digest: &str,
    holdout: &[usize],
    config: &TrainConfig,
    log: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_params(dir, params)?;
    write_optimizer(dir, opt)?;
    fs::write(dir.join("sampler.json"), sampler.to_json()?)?;
    let manifest = TrainerManifest {
        version: FORMAT_VERSION,
        step,
        dataset_len,
        dataset_digest: dataset_digest.to_string(),
        holdout: holdout.to_vec(),
        config: config.clone(),
    };
    write_json(&dir.join("trainer.json"), &manifest)?;
    fs::write(dir.join("log.csv"), log)?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<CheckpointBundle> {
    if !dir.join("trainer.json").is_file() {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint directory",
            dir.display()
        )));
    }
    let manifest: TrainerManifest = read_json(&dir.join("trainer.json"))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "trainer.json has unsupported version {}",
            manifest.version
        )));
    }
    let params = read_params(dir)?;
    let optimizer = read_optimizer(dir)?;
    let sampler_text = fs::read_to_string(dir.join("sampler.json"))
        .map_err(|e| Error::Checkpoint(format!("cannot read sampler.json: {e}")))?;
    let sampler = SamplerState::from_json(&sampler_text)?;
    let log = fs::read_to_string(dir.join("log.csv"))
        .map_err(|e| Error::Checkpoint(format!("cannot read log.csv: {e}")))?;
    Ok(CheckpointBundle {
        params,
        optimizer,
        sampler,
        step: manifest.step,
        dataset_len: manifest.dataset_len,
        dataset_digest: manifest.dataset_digest,
        holdout: manifest.holdout,
        config: manifest.config,
        log,
    })
}
