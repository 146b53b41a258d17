//! The `manifest.json` written next to every run's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::experiment::CellRun;
use crate::model::{Model, ModelConfig, Wiring};
use crate::params::Group;
use crate::synth::{CohortSpec, ShiftSpec};
use crate::train::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub cohort: Option<CohortSpec>,
    pub shift: Option<ShiftSpec>,
    pub eval: Option<EvalSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub tta_lr: Option<f64>,
    pub batch: usize,
    pub order: String,
    pub split: String,
    pub resamples: usize,
    pub bootstrap_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub theta_m: usize,
    pub theta_s: usize,
    pub theta_e: usize,
}

impl ParamCounts {
    pub fn of(model: &Model) -> Self {
        let [m, s, e] = Group::ALL.map(|g| model.store.count(g));
        Self {
            theta_m: m,
            theta_s: s,
            theta_e: e,
        }
    }

    pub fn total(&self) -> usize {
        self.theta_m + self.theta_s + self.theta_e
    }
}

/// One trained or evaluated configuration inside a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub label: String,
    pub wiring: Wiring,
    pub experts: usize,
    pub params: ParamCounts,
    pub tta_lr: Option<f64>,
    pub epochs: Option<usize>,
    pub valid_auprc: Option<f64>,
    pub auprc: Option<(f64, f64)>,
    pub auroc: Option<(f64, f64)>,
    pub expert_entropy: Option<f64>,
    pub max_entropy: Option<f64>,
    pub recon_loss: Option<f64>,
}

impl CellRecord {
    pub fn of_model(label: impl Into<String>, model: &Model) -> Self {
        Self {
            label: label.into(),
            wiring: model.wiring,
            experts: model.moe.as_ref().map_or(0, |m| m.n_experts()),
            params: ParamCounts::of(model),
            tta_lr: None,
            epochs: None,
            valid_auprc: None,
            auprc: None,
            auroc: None,
            expert_entropy: None,
            max_entropy: None,
            recon_loss: None,
        }
    }

    pub fn of_cell(run: &CellRun) -> Self {
        let e = &run.evaluation;
        Self {
            tta_lr: e.tta_lr,
            epochs: Some(run.outcome.history.len()),
            valid_auprc: run.outcome.checkpoint.best_valid_auprc,
            auprc: Some((e.metrics.auprc.point, e.metrics.auprc.std)),
            auroc: Some((e.metrics.auroc.point, e.metrics.auroc.std)),
            expert_entropy: e.expert_load.as_ref().map(|l| l.entropy),
            max_entropy: e.expert_load.as_ref().map(|l| l.max_entropy),
            recon_loss: e.recon_loss,
            ..Self::of_model(run.label.clone(), &run.outcome.model)
        }
    }
}

/// Wall-clock measurements; the only part of a run that is not
/// reproducible byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub phases: BTreeMap<String, f64>,
    /// Seconds of every training epoch, keyed by cell label.
    pub epoch_seconds: BTreeMap<String, Vec<f64>>,
}

impl Timings {
    pub fn mean_epoch_seconds(&self, label: &str) -> Option<f64> {
        let e = self.epoch_seconds.get(label)?;
        (!e.is_empty()).then(|| e.iter().sum::<f64>() / e.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: ResolvedConfig,
    /// SHA-256 of the inputs, keyed by logical name.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 over command, config and input hashes.
    pub input_hash: String,
    pub artifacts: Vec<String>,
    pub cells: Vec<CellRecord>,
    pub timings: Timings,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl RunManifest {
    pub fn new(command: &str, config: ResolvedConfig, inputs: BTreeMap<String, String>) -> Result<Self> {
        let canonical = serde_json::to_vec(&(command, &config, &inputs))?;
        let input_hash = hex::encode(Sha256::digest(&canonical));
        Ok(Self {
            run_id: format!("{command}-{}", &input_hash[..12]),
            command: command.to_string(),
            config,
            inputs,
            input_hash,
            artifacts: Vec::new(),
            cells: Vec::new(),
            timings: Timings::default(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = if dir.is_dir() { dir.join(MANIFEST_FILE) } else { dir.to_path_buf() };
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
