//! Experiment protocols shared by the command line and the examples:
//! split-and-impute, train-then-stream, ablations, sweeps and the
//! cross-domain comparison.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::LabeledSet;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Model, ModelConfig, Wiring};
use crate::moe::{expert_load_report, ExpertLoadReport};
use crate::params::Group;
use crate::synth::{feature_means, stratified_split, Dataset, Split, Target, SPLIT_FRACTIONS};
use crate::train::{evaluate_stream, labels_u8, train, StreamOptions, StreamOrder, StreamResult, TrainConfig, TrainOutcome};

/// Train/valid/test sets of one dataset, imputed with training means.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: Split,
    pub defaults: Vec<f64>,
    pub train: LabeledSet,
    pub valid: LabeledSet,
    pub test: LabeledSet,
}

pub fn prepare(data: &Dataset, seed: u64, target: Target) -> Result<Prepared> {
    let split = stratified_split(&data.labels(target), SPLIT_FRACTIONS, seed)?;
    let defaults = feature_means(split.train.iter().map(|&i| &data.patients[i].x), data.features());
    Ok(Prepared {
        train: data.labeled_set(&split.train, &defaults, target)?,
        valid: data.labeled_set(&split.valid, &defaults, target)?,
        test: data.labeled_set(&split.test, &defaults, target)?,
        split,
        defaults,
    })
}

/// Test-set evaluation of one trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub tta_lr: Option<f64>,
    pub metrics: MetricsReport,
    pub expert_load: Option<ExpertLoadReport>,
    /// Mean per-batch `l_s` on arrival.
    pub recon_loss: Option<f64>,
    pub batches: usize,
}

pub fn evaluate(
    model: &Model,
    set: &LabeledSet,
    opts: &StreamOptions,
    order: StreamOrder,
    resamples: usize,
    bootstrap_seed: u64,
) -> Result<(Evaluation, StreamResult)> {
    let stream = evaluate_stream(model, set, opts, order)?;
    let labels = labels_u8(set);
    let metrics = MetricsReport::compute(&stream.scores, &labels, resamples, bootstrap_seed)?;
    let expert_load = if stream.gates.is_empty() {
        None
    } else {
        Some(expert_load_report(&stream.gates)?)
    };
    let eval = Evaluation {
        tta_lr: opts.tta_lr,
        metrics,
        expert_load,
        recon_loss: stream.mean_recon_loss_pre(),
        batches: set.len().div_ceil(opts.batch_size),
    };
    Ok((eval, stream))
}

/// Result of training one configuration and streaming its test split.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub label: String,
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub wiring: Wiring,
    pub experts: usize,
    pub tta_lr: Option<f64>,
    pub test_auprc: f64,
    pub test_auprc_std: f64,
    pub test_auroc: f64,
    pub test_auroc_std: f64,
    pub valid_auprc: f64,
    pub epochs: usize,
    pub expert_entropy: Option<f64>,
    pub params: [usize; 3],
}

impl CellRun {
    pub fn summary(&self) -> CellSummary {
        let m = &self.evaluation.metrics;
        let model = &self.outcome.model;
        CellSummary {
            label: self.label.clone(),
            wiring: model.wiring,
            experts: model.moe.as_ref().map_or(0, |m| m.n_experts()),
            tta_lr: self.evaluation.tta_lr,
            test_auprc: m.auprc.point,
            test_auprc_std: m.auprc.std,
            test_auroc: m.auroc.point,
            test_auroc_std: m.auroc.std,
            valid_auprc: self.outcome.best_valid_auprc(),
            epochs: self.outcome.history.len(),
            expert_entropy: self.evaluation.expert_load.as_ref().map(|e| e.entropy),
            params: Group::ALL.map(|g| model.store.count(g)),
        }
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        let e = &self.outcome.epoch_seconds;
        e.iter().sum::<f64>() / e.len().max(1) as f64
    }
}

/// Trains `model_cfg` and streams the test split with `test_tta_lr`.
pub fn run_cell(
    label: impl Into<String>,
    prepared: &Prepared,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    test_tta_lr: Option<f64>,
    resamples: usize,
) -> Result<CellRun> {
    let started = Instant::now();
    let model = Model::new(model_cfg.clone(), prepared.train.features())?;
    let outcome = train(model, &prepared.train, &prepared.valid, train_cfg, &prepared.defaults)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let opts = StreamOptions {
        tta_lr: test_tta_lr,
        batch_size: train_cfg.stream_batch,
        steps: train_cfg.tta_steps,
    };
    let (evaluation, _) = evaluate(
        &outcome.model,
        &prepared.test,
        &opts,
        StreamOrder::Natural,
        resamples,
        train_cfg.seed,
    )?;
    Ok(CellRun {
        label: label.into(),
        outcome,
        evaluation,
        train_seconds,
    })
}

/// Maximum number of sweep cells run at once (`TAMER_THREADS`, default:
/// all cores).
pub fn sweep_threads() -> usize {
    std::env::var("TAMER_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(rayon::current_num_threads)
}

fn run_parallel<T: Send, F>(jobs: Vec<T>, f: F) -> Result<Vec<CellRun>>
where
    F: Fn(T) -> Result<CellRun> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| jobs.into_par_iter().map(&f).collect())
}

/// The five wirings trained under one seed set.
pub fn ablate(prepared: &Prepared, base: &ModelConfig, train_cfg: &TrainConfig, resamples: usize) -> Result<Vec<CellRun>> {
    run_parallel(Wiring::ALL.to_vec(), |w| {
        let cfg = w.apply(base);
        let tta_lr = if w.has_tta() { train_cfg.tta_lr } else { None };
        run_cell(w.name(), prepared, &cfg, train_cfg, tta_lr, resamples)
    })
}

/// One full model per expert count.
pub fn sweep_experts(
    prepared: &Prepared,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    experts: &[usize],
    resamples: usize,
) -> Result<Vec<CellRun>> {
    run_parallel(experts.to_vec(), |e| {
        let cfg = ModelConfig {
            experts: e,
            ..Wiring::TtaBeforeMoe.apply(base)
        };
        run_cell(format!("E={e}"), prepared, &cfg, train_cfg, train_cfg.tta_lr, resamples)
    })
}

/// One full model per test-time learning rate; the same rate is used for
/// validation streams during training.
pub fn sweep_tta_lr(
    prepared: &Prepared,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    rates: &[Option<f64>],
    resamples: usize,
) -> Result<Vec<CellRun>> {
    run_parallel(rates.to_vec(), |lr| {
        let cfg = Wiring::TtaBeforeMoe.apply(base);
        let tc = TrainConfig {
            tta_lr: lr,
            ..train_cfg.clone()
        };
        let label = lr.map_or_else(|| "None".to_string(), |v| format!("{v:e}"));
        run_cell(label, prepared, &cfg, &tc, lr, resamples)
    })
}

/// Index of the cell with the highest test AUPRC (first on ties).
pub fn argmax(cells: &[CellSummary]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        if best.is_none_or(|b| c.test_auprc > cells[b].test_auprc) {
            best = Some(i);
        }
    }
    best
}
