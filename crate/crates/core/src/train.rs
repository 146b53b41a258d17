//! Joint training with early stopping, and the frozen streaming
//! evaluation used for validation and test.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::batch::{Batch, LabeledSet};
use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::metrics::{auprc, auroc};
use crate::model::{Model, ModelConfig};
use crate::moe::GateProfile;
use crate::optim::AdamW;
use crate::params::ParamSource;
use crate::rng::{derive_seed, stream, StreamRng};
use crate::synth::Target;
use crate::tta::AdaptationState;

pub const LR_GRID: [f64; 3] = [1e-2, 1e-3, 1e-4];
pub const TTA_LR_GRID: [Option<f64>; 6] = [None, Some(1e-5), Some(1e-4), Some(1e-3), Some(1e-2), Some(1e-1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Test-time learning rate used for validation streams; `None`
    /// disables adaptation.
    pub tta_lr: Option<f64>,
    pub tta_steps: usize,
    /// Batch size of validation and test streams.
    pub stream_batch: usize,
    /// Weight of `l_s` in the joint objective.
    pub recon_weight: f64,
    pub target: Target,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 1024,
            max_epochs: 100,
            patience: 10,
            tta_lr: Some(1e-5),
            tta_steps: 1,
            stream_batch: 1024,
            recon_weight: 1.0,
            target: Target::Mortality,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.stream_batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "need 0 <= patience < max_epochs, got patience {} and max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if let Some(lr) = self.tta_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("tta learning rate must be positive, got {lr}")));
            }
        }
        if self.tta_steps == 0 {
            return Err(Error::Config("tta steps must be at least 1".into()));
        }
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return Err(Error::Config("reconstruction weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Recorded joint objective of one batch.
pub struct JointLoss {
    pub tape: Tape,
    pub total_node: NodeId,
    pub total: f64,
    pub l_m: f64,
    pub l_s: f64,
}

/// `total = l_m + w * l_s`, with `l_m` the mean BCE of the logits and `l_s`
/// the reconstruction loss (0 without a test-time layer).
pub fn loss_joint(model: &Model, src: &dyn ParamSource, batch: &Batch, recon_weight: f64) -> Result<JointLoss> {
    let y = batch
        .labels
        .clone()
        .ok_or_else(|| Error::Data("training batch has no labels".into()))?;
    let mut tape = Tape::new();
    let nodes = model.record(&mut tape, src, batch)?;
    let lm = tape.bce_with_logits(nodes.logits, y)?;
    let (total_node, l_s) = match nodes.recon_loss {
        Some(ls) => {
            let weighted = if recon_weight == 1.0 {
                ls
            } else {
                tape.scale(ls, recon_weight)?
            };
            (tape.add(lm, weighted)?, tape.scalar(ls))
        }
        None => (lm, 0.0),
    };
    Ok(JointLoss {
        total: tape.scalar(total_node),
        l_m: tape.scalar(lm),
        l_s,
        total_node,
        tape,
    })
}

/// Order in which a stream visits its patients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StreamOrder {
    #[default]
    Natural,
    Shuffle(u64),
}

impl StreamOrder {
    pub fn permutation(self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        if let StreamOrder::Shuffle(seed) = self {
            p.shuffle(&mut StreamRng::seed_from_u64(derive_seed(seed, stream::STREAM_ORDER)));
        }
        p
    }
}

impl fmt::Display for StreamOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamOrder::Natural => f.write_str("natural"),
            StreamOrder::Shuffle(s) => write!(f, "shuffle:{s}"),
        }
    }
}

impl FromStr for StreamOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "natural" {
            return Ok(StreamOrder::Natural);
        }
        s.strip_prefix("shuffle:")
            .and_then(|v| v.parse().ok())
            .map(StreamOrder::Shuffle)
            .ok_or_else(|| Error::Config(format!("order must be natural or shuffle:<seed>, got '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamOptions {
    pub tta_lr: Option<f64>,
    pub batch_size: usize,
    pub steps: usize,
}

impl StreamOptions {
    pub fn frozen(batch_size: usize) -> Self {
        Self {
            tta_lr: None,
            batch_size,
            steps: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StreamResult {
    /// Sigmoid scores, aligned with the positions of the evaluated set.
    pub scores: Vec<f64>,
    pub state: Option<AdaptationState>,
    pub gates: Vec<GateProfile>,
    /// Per-batch `l_s` after adaptation.
    pub recon_loss: Vec<f64>,
    /// Per-batch `l_s` on arrival, before adaptation.
    pub recon_loss_pre: Vec<f64>,
}

impl StreamResult {
    pub fn mean_recon_loss_pre(&self) -> Option<f64> {
        mean(&self.recon_loss_pre)
    }

    pub fn mean_recon_loss(&self) -> Option<f64> {
        mean(&self.recon_loss)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Streams `set` through the model in the given order; batches are
/// processed strictly sequentially and only the test-time layer adapts.
pub fn evaluate_stream_ordered(model: &Model, set: &LabeledSet, opts: &StreamOptions, order: &[usize]) -> Result<StreamResult> {
    if opts.batch_size == 0 {
        return Err(Error::Config("stream batch size must be at least 1".into()));
    }
    let n = set.len();
    let mut seen = vec![false; n];
    if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Contract("stream order is not a permutation of the set".into()));
    }
    if n == 0 {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut state = model.adaptation_state(opts.tta_lr)?;
    let mut scores = vec![0.0; n];
    let mut gates = Vec::new();
    let mut recon = Vec::new();
    let mut recon_pre = Vec::new();
    for chunk in order.chunks(opts.batch_size) {
        let batch = set.batch(chunk)?;
        let out = model.stream_step(&batch, state.as_mut(), opts.steps)?;
        for (&i, &l) in chunk.iter().zip(out.logits.iter()) {
            scores[i] = sigmoid(l);
        }
        gates.extend(out.gates);
        recon.extend(out.recon_loss);
        recon_pre.extend(out.recon_loss_pre);
    }
    Ok(StreamResult {
        scores,
        state,
        gates,
        recon_loss: recon,
        recon_loss_pre: recon_pre,
    })
}

pub fn evaluate_stream(model: &Model, set: &LabeledSet, opts: &StreamOptions, order: StreamOrder) -> Result<StreamResult> {
    evaluate_stream_ordered(model, set, opts, &order.permutation(set.len()))
}

pub fn labels_u8(set: &LabeledSet) -> Vec<u8> {
    set.y.iter().map(|&v| u8::from(v == 1.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub l_m: f64,
    pub l_s: f64,
    pub valid_auprc: f64,
    pub valid_auroc: f64,
    pub valid_l_s: Option<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model holding the best-validation weights.
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Wall-clock seconds of each epoch (training plus validation).
    pub epoch_seconds: Vec<f64>,
}

impl TrainOutcome {
    pub fn best_valid_auprc(&self) -> f64 {
        self.checkpoint.best_valid_auprc.expect("training records the best validation AUPRC")
    }
}

/// Joint training of all three groups with AdamW; the test-time layer is
/// reached only by `l_s`. After every epoch the validation set is streamed
/// with a throwaway copy of the test-time weights.
pub fn train(
    mut model: Model,
    train_set: &LabeledSet,
    valid_set: &LabeledSet,
    cfg: &TrainConfig,
    impute_defaults: &[f64],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let ids = model.store.ids();
    let mut opt = AdamW::new(&model.store, &ids, cfg.weight_decay);
    let shuffle_seed = derive_seed(cfg.seed, stream::SHUFFLE);
    let mut rng = StreamRng::seed_from_u64(shuffle_seed);
    let stream_opts = StreamOptions {
        tta_lr: cfg.tta_lr,
        batch_size: cfg.stream_batch,
        steps: cfg.tta_steps,
    };
    let valid_labels = labels_u8(valid_set);
    let mut history = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum, mut sum_m, mut sum_s) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.batch(chunk)?;
            let loss = loss_joint(&model, &model.store, &batch, cfg.recon_weight)?;
            let grads = loss.tape.backward(loss.total_node, &ids)?;
            opt.step(&mut model.store, &grads, cfg.lr)?;
            let w = chunk.len() as f64;
            sum += loss.total * w;
            sum_m += loss.l_m * w;
            sum_s += loss.l_s * w;
        }
        let n = train_set.len() as f64;
        let valid = evaluate_stream(&model, valid_set, &stream_opts, StreamOrder::Natural)?;
        let valid_auprc = auprc(&valid.scores, &valid_labels)?;
        let valid_auroc = auroc(&valid.scores, &valid_labels)?;
        let improved = best.as_ref().is_none_or(|(b, _)| valid_auprc > *b);
        history.push(EpochRecord {
            epoch,
            loss: sum / n,
            l_m: sum_m / n,
            l_s: sum_s / n,
            valid_auprc,
            valid_auroc,
            valid_l_s: valid.mean_recon_loss(),
            improved,
        });
        if improved {
            since_best = 0;
            let ckpt = Checkpoint {
                config: model.config.clone(),
                input_dim: model.input_dim,
                store: model.store.clone(),
                optimizer: Some(opt.clone()),
                best_valid_auprc: Some(valid_auprc),
                epoch,
                rng: Some(RngState::capture(shuffle_seed, &rng)),
                impute_defaults: impute_defaults.to_vec(),
                target: cfg.target,
                split_seed: cfg.seed,
            };
            best = Some((valid_auprc, ckpt));
        } else {
            since_best += 1;
        }
        epoch_seconds.push(started.elapsed().as_secs_f64());
        if since_best > 0 && since_best >= cfg.patience {
            break;
        }
    }
    let (_, checkpoint) = best.expect("at least one epoch ran");
    model.store = checkpoint.store.clone();
    Ok(TrainOutcome {
        model,
        checkpoint,
        history,
        epoch_seconds,
    })
}

/// One cell of a learning-rate grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub tta_lr: Option<f64>,
    pub valid_auprc: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub cells: Vec<GridCell>,
    pub best: usize,
    pub outcome: TrainOutcome,
}

/// Trains one model per `(lr, tta_lr)` pair and keeps the best by
/// validation AUPRC (ties go to the earlier cell). Cells run in parallel.
pub fn grid_search(
    model_cfg: &ModelConfig,
    input_dim: usize,
    train_set: &LabeledSet,
    valid_set: &LabeledSet,
    base: &TrainConfig,
    pairs: &[(f64, Option<f64>)],
    impute_defaults: &[f64],
) -> Result<GridOutcome> {
    if pairs.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    let runs = pairs
        .par_iter()
        .map(|&(lr, tta_lr)| {
            let cfg = TrainConfig {
                lr,
                tta_lr,
                ..base.clone()
            };
            let model = Model::new(model_cfg.clone(), input_dim)?;
            train(model, train_set, valid_set, &cfg, impute_defaults)
        })
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<GridCell> = pairs
        .iter()
        .zip(&runs)
        .map(|(&(lr, tta_lr), r)| GridCell {
            lr,
            tta_lr,
            valid_auprc: r.best_valid_auprc(),
            epochs: r.history.len(),
        })
        .collect();
    let mut best = 0;
    for (i, c) in cells.iter().enumerate() {
        if c.valid_auprc > cells[best].valid_auprc {
            best = i;
        }
    }
    let outcome = runs.into_iter().nth(best).expect("best index in range");
    Ok(GridOutcome { cells, best, outcome })
}
