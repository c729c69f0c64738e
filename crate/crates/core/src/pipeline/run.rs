//! Dataset files and run directories.
//!
//! A dataset is either one file (JSON lines, or a JSON object or array) or a
//! directory. A directory holding `train.jsonl` uses it for training and
//! `dev.jsonl`, when present, for model selection; any other directory is
//! read file by file in name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::config::{hex, PipelineConfig};
use super::PipelineError;
use crate::dialogue::{parse_value, quads_to_json, NullPolicy, Record};
use crate::grid::Quadruple;

pub const MANIFEST: &str = "manifest.json";

fn io(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", path.display()))
}

/// Records of one file.
pub fn read_records(path: &Path, policy: NullPolicy) -> Result<Vec<Record>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let with_ctx = |line: usize, e: PipelineError| PipelineError::Data(format!("{}:{line}: {e}", path.display()));
    let trimmed = text.trim_start();
    if path.extension().is_some_and(|e| e == "json") || trimmed.starts_with('[') {
        let v: Value = serde_json::from_str(&text).map_err(|e| with_ctx(e.line(), PipelineError::Data(e.to_string())))?;
        let items = match v {
            Value::Array(items) => items,
            other => vec![other],
        };
        return items.iter().enumerate().map(|(i, v)| parse_value(v, policy).map_err(|e| with_ctx(i + 1, e.into()))).collect();
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: Value = serde_json::from_str(l).map_err(|e| with_ctx(i + 1, PipelineError::Data(e.to_string())))?;
            parse_value(&v, policy).map_err(|e| with_ctx(i + 1, e.into()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Record>,
    /// Equal to `train` when no dev split exists.
    pub dev: Vec<Record>,
    pub dropped_quads: usize,
}

fn data_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json" || e == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_dataset(path: &Path, policy: NullPolicy) -> Result<Dataset, PipelineError> {
    let (train, dev) = if path.is_dir() {
        let train_file = path.join("train.jsonl");
        if train_file.exists() {
            let dev_file = path.join("dev.jsonl");
            let train = read_records(&train_file, policy)?;
            let dev = if dev_file.exists() { read_records(&dev_file, policy)? } else { train.clone() };
            (train, dev)
        } else {
            let mut all = Vec::new();
            for f in data_files(path)? {
                all.extend(read_records(&f, policy)?);
            }
            (all.clone(), all)
        }
    } else {
        let all = read_records(path, policy)?;
        (all.clone(), all)
    };
    if train.is_empty() {
        return Err(PipelineError::Data(format!("{}: no dialogues", path.display())));
    }
    let dropped_quads = train.iter().chain(&dev).map(|r| r.dropped_quads).sum();
    Ok(Dataset { train, dev, dropped_quads })
}

pub fn records_jsonl(records: &[Record]) -> String {
    records.iter().map(|r| r.to_json().to_string() + "\n").collect()
}

/// `{"doc_id", "quadruples"}` per dialogue, one per line.
pub fn predictions_jsonl(docs: &[(String, Vec<Quadruple>)]) -> String {
    docs.iter()
        .map(|(id, q)| serde_json::json!({ "doc_id": id, "quadruples": quads_to_json(q) }).to_string() + "\n")
        .collect()
}

/// Hash of a file's bytes framed like a git blob, with SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    /// Hash over the sorted `(name, blob hash)` list.
    pub content_hash: String,
    pub files: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl Manifest {
    pub fn build(cfg: &PipelineConfig, files: &BTreeMap<String, Vec<u8>>, notes: BTreeMap<String, String>) -> Self {
        let hashes: BTreeMap<String, String> = files.iter().map(|(k, v)| (k.clone(), blob_hash(v))).collect();
        let mut h = Sha256::new();
        for (name, hash) in &hashes {
            h.update(format!("{name}\0{hash}\n").as_bytes());
        }
        Manifest { config_hash: cfg.hash(), content_hash: hex(&h.finalize()), files: hashes, notes }
    }
}

/// Writes `files` into `dir` (created if needed) followed by the manifest.
pub fn write_run_dir(dir: &Path, cfg: &PipelineConfig, files: &BTreeMap<String, Vec<u8>>, notes: BTreeMap<String, String>) -> Result<Manifest, PipelineError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (name, bytes) in files {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| io(&p, e))?;
    }
    let m = Manifest::build(cfg, files, notes);
    let p = dir.join(MANIFEST);
    fs::write(&p, serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n").map_err(|e| io(&p, e))?;
    Ok(m)
}

/// Re-hashes every file listed in a run directory's manifest.
pub fn verify_run_dir(dir: &Path) -> Result<Manifest, PipelineError> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| io(&p, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| PipelineError::Data(e.to_string()))?;
    for (name, hash) in &m.files {
        let f = dir.join(name);
        let bytes = fs::read(&f).map_err(|e| io(&f, e))?;
        if &blob_hash(&bytes) != hash {
            return Err(PipelineError::Data(format!("{name}: content hash mismatch")));
        }
    }
    Ok(m)
}
