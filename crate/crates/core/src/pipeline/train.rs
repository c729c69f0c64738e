//! Mini-batch training with early stopping and resumable checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::model::{Example, Model};
use super::vocab::Vocab;
use super::PipelineError;
use crate::grid::{evaluate, Metrics, Quadruple};
use crate::tensor::{Graph, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-dialogue loss over the epoch.
    pub loss: f64,
    pub dev_micro_f1: f64,
    pub dev_ident_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_f1: f64,
    pub stop: StopReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochLimit,
    Patience,
    Target,
}

/// Predictions and metrics over `examples`, without dropout.
pub fn evaluate_model(model: &Model, examples: &[Example]) -> Result<(Metrics, Vec<Vec<Quadruple>>), PipelineError> {
    let pred = examples.iter().map(|ex| model.predict(ex)).collect::<Result<Vec<_>, _>>()?;
    let gold: Vec<Vec<Quadruple>> = examples.iter().map(|ex| ex.record.quads.clone()).collect();
    Ok((evaluate(&pred, &gold)?, pred))
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Training state. Shuffling and dropout masks derive from the seed, the
/// epoch and the optimizer step, so a checkpoint resumes bit-exactly.
pub struct Trainer<'a> {
    pub model: Model,
    train: &'a [Example],
    dev: &'a [Example],
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    best: Option<(f64, usize, ParamStore)>,
    bad_epochs: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, train: &'a [Example], dev: &'a [Example]) -> Result<Self, PipelineError> {
        if train.is_empty() {
            return Err(PipelineError::Data("training set is empty".into()));
        }
        Ok(Trainer { model, train, dev, epoch: 0, history: Vec::new(), best: None, bad_epochs: 0 })
    }

    pub fn cfg(&self) -> &PipelineConfig {
        &self.model.cfg
    }

    /// Batches of epoch `epoch` (1-based) as example indices.
    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.cfg().seed, epoch as u64, 0)));
        idx.chunks(self.cfg().batch_size).map(<[usize]>::to_vec).collect()
    }

    /// One optimizer step on `batch`; returns the mean loss.
    pub fn step(&mut self, batch: &[usize]) -> Result<f64, PipelineError> {
        let step = self.model.store.step();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        self.model.store.zero_grads();
        for (j, &i) in batch.iter().enumerate() {
            let ex = &self.train[i];
            let rng = ChaCha8Rng::seed_from_u64(mix(self.cfg().seed, step + 1, j as u64 + 1));
            let mut g = Graph::training(self.cfg().dropout, rng);
            let loss = self.model.loss(&mut g, ex)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(PipelineError::Divergence { what: "loss", epoch: self.epoch, step, doc: ex.doc_id().to_string(), value });
            }
            let grads = g.backward(loss)?;
            self.model.store.accumulate(&g, &grads, scale);
            total += value;
        }
        if !self.model.store.grads_finite() {
            let doc = batch.iter().map(|&i| self.train[i].doc_id()).collect::<Vec<_>>().join(",");
            return Err(PipelineError::Divergence { what: "gradient", epoch: self.epoch, step, doc, value: f64::NAN });
        }
        self.cfg().optimizer().step(&mut self.model.store);
        Ok(total * scale)
    }

    /// Trains one epoch and evaluates on the dev set.
    pub fn run_epoch(&mut self) -> Result<EpochLog, PipelineError> {
        self.epoch += 1;
        let mut sum = 0.0;
        for batch in self.batches(self.epoch) {
            sum += self.step(&batch)? * batch.len() as f64;
        }
        let (m, _) = evaluate_model(&self.model, self.dev)?;
        let log = EpochLog { epoch: self.epoch, loss: sum / self.train.len() as f64, dev_micro_f1: m.micro.f1, dev_ident_f1: m.ident.f1 };
        match &self.best {
            Some((f1, _, _)) if log.dev_micro_f1 <= *f1 => self.bad_epochs += 1,
            _ => {
                self.best = Some((log.dev_micro_f1, self.epoch, self.model.store.clone()));
                self.bad_epochs = 0;
            }
        }
        self.history.push(log.clone());
        Ok(log)
    }

    fn stop_reason(&self) -> Option<StopReason> {
        let last = self.history.last()?;
        if self.cfg().target_f1.is_some_and(|t| last.dev_micro_f1 >= t) {
            return Some(StopReason::Target);
        }
        if self.bad_epochs >= self.cfg().patience {
            return Some(StopReason::Patience);
        }
        (self.epoch >= self.cfg().epochs).then_some(StopReason::EpochLimit)
    }

    /// Trains until the epoch limit, patience or the target F1, then
    /// restores the best parameters seen on the dev set.
    pub fn fit(&mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainReport, PipelineError> {
        let stop = loop {
            if let Some(r) = self.stop_reason() {
                break r;
            }
            let log = self.run_epoch()?;
            on_epoch(&log);
        };
        let (best_f1, best_epoch, store) = self.best.clone().expect("at least one epoch ran");
        self.model.store = store;
        Ok(TrainReport { history: self.history.clone(), best_epoch, best_f1, stop })
    }

    /// Writes the current state to `path` and the best parameters so far to
    /// `path` with a `.best` suffix.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), PipelineError> {
        let mut meta = model_meta(&self.model);
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("bad_epochs".into(), self.bad_epochs.to_string());
        meta.insert("history".into(), serde_json::to_string(&self.history).expect("history serializes"));
        if let Some((f1, epoch, store)) = &self.best {
            meta.insert("best_f1".into(), f1.to_string());
            meta.insert("best_epoch".into(), epoch.to_string());
            store.save(&best_path(path), &BTreeMap::new())?;
        }
        self.model.store.save(path, &meta)?;
        Ok(())
    }

    /// Restores a trainer written by [`Trainer::save_checkpoint`].
    pub fn resume(path: &Path, train: &'a [Example], dev: &'a [Example]) -> Result<Self, PipelineError> {
        let (model, meta) = load_model(path)?;
        let get = |k: &str| meta.get(k).ok_or_else(|| PipelineError::Checkpoint(format!("missing `{k}`")));
        let num = |k: &str| -> Result<usize, PipelineError> { get(k)?.parse().map_err(|_| PipelineError::Checkpoint(format!("bad `{k}`"))) };
        let mut t = Trainer::new(model, train, dev)?;
        t.epoch = num("epoch")?;
        t.bad_epochs = num("bad_epochs")?;
        t.history = serde_json::from_str(get("history")?).map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
        if meta.contains_key("best_f1") {
            let f1: f64 = get("best_f1")?.parse().map_err(|_| PipelineError::Checkpoint("bad `best_f1`".into()))?;
            let (store, _) = ParamStore::load(&best_path(path))?;
            let mut probe = t.model.clone();
            probe.load_store(store)?;
            t.best = Some((f1, num("best_epoch")?, probe.store));
        }
        Ok(t)
    }
}

fn best_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".best");
    PathBuf::from(s)
}

fn model_meta(model: &Model) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("config".into(), model.cfg.to_toml());
    meta.insert("vocab".into(), model.vocab.to_json());
    meta
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), PipelineError> {
    model.store.save(path, &model_meta(model))?;
    Ok(())
}

/// Rebuilds a model (config, vocabulary and parameters) from a checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, BTreeMap<String, String>), PipelineError> {
    let (store, meta) = ParamStore::load(path)?;
    let cfg = PipelineConfig::from_toml(meta.get("config").ok_or_else(|| PipelineError::Checkpoint("missing config".into()))?)?;
    let vocab = Vocab::from_json(meta.get("vocab").ok_or_else(|| PipelineError::Checkpoint("missing vocab".into()))?)
        .map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
    let mut model = Model::new(&cfg, vocab)?;
    model.load_store(store)?;
    Ok((model, meta))
}
