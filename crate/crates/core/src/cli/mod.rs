//! Command-line front end. Every command writes its outputs and a
//! `manifest.json` into one run directory.
//!
//! Exit codes: 0 success, 2 config or validation error, 3 contract
//! violation (such as a freeze breach), 4 I/O error.

pub mod manifest;
pub mod markdown;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::experiment::{self, prepare, CellRun, Evaluation, Prepared};
use crate::metrics::{Metric, Significance, DEFAULT_RESAMPLES};
use crate::model::{Model, ModelConfig, EXPERT_GRID};
use crate::moe::{ExpertLoadReport, GateProfile};
use crate::params::Group;
use crate::synth::{apply_shift, generate_cohort, read_dataset, stratified_split, write_dataset, CohortSpec, Dataset, ShiftSpec, SPLIT_FRACTIONS};
use crate::train::{grid_search, train, StreamOptions, StreamOrder, TrainConfig, TrainOutcome, LR_GRID, TTA_LR_GRID};

use manifest::{sha256_file, CellRecord, EvalSettings, ResolvedConfig, RunManifest};

/// Env var that makes `eval` corrupt the frozen groups, to exercise the
/// freeze check.
pub const FAULT_INJECT_ENV: &str = "TAMER_FAULT_INJECT";

#[derive(Debug, Parser)]
#[command(name = "tamer", version, about = "Test-time adaptive mixture-of-experts heads for clinical sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort (optionally shifted) on disk.
    GenData(GenDataArgs),
    /// Train one model and write its checkpoint.
    Train(TrainArgs),
    /// Stream a split through a checkpoint and score it.
    Eval(EvalArgs),
    /// Train and evaluate the five ablation wirings.
    Ablate(AblateArgs),
    /// One run per expert count or test-time learning rate.
    Sweep(SweepArgs),
    /// Train on one cohort and stream another, frozen and adapted.
    CrossDomain(CrossDomainArgs),
    /// Aggregate run manifests into one Markdown document.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Cohort spec (JSON); defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Covariate shift (JSON) applied to the generated cohort.
    #[arg(long)]
    pub shift: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model config (JSON).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Training config (JSON).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Run directory for the checkpoint, history and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Search the learning-rate grid and keep the best validation cell.
    #[arg(long)]
    pub grid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Test,
    All,
}

impl SplitChoice {
    fn name(self) -> &'static str {
        match self {
            SplitChoice::Test => "test",
            SplitChoice::All => "all",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory or its `checkpoint.json`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Test-time learning rate, or `none` for a frozen stream.
    #[arg(long, default_value = "1e-5")]
    pub tta_lr: String,
    #[arg(long, default_value_t = 1024)]
    pub batch: usize,
    /// `natural` or `shuffle:<seed>`.
    #[arg(long, default_value = "natural")]
    pub order: String,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; defaults to `eval-<lr>` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Base model config; wiring fields are overridden per cell.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub resamples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Experts,
    TtaLr,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub resamples: usize,
}

#[derive(Debug, Args)]
pub struct CrossDomainArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Learning rate of the adapted stream.
    #[arg(long, default_value_t = 1e-5)]
    pub tta_lr: f64,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub resamples: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories (or manifest files) to aggregate.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "report.md")]
    pub out: PathBuf,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Contract(_) => 3,
        Error::Io(_) => 4,
        Error::Json(j) if j.is_io() => 4,
        Error::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => 4,
        _ => 2,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
        Command::Sweep(a) => sweep_cmd(&a),
        Command::CrossDomain(a) => cross_domain_cmd(&a),
        Command::Report(a) => report_cmd(&a),
    }
}

/// Reads a flat JSON config; unknown keys and bad values are config
/// errors, a missing file is an I/O error.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn dataset_inputs(prefix: &str, dir: &Path, inputs: &mut BTreeMap<String, String>) -> Result<()> {
    for f in ["manifest.json", "visits.csv", "patients.csv"] {
        inputs.insert(format!("{prefix}/{f}"), sha256_file(&dir.join(f))?);
    }
    Ok(())
}

fn checkpoint_inputs(path: &Path, inputs: &mut BTreeMap<String, String>) -> Result<()> {
    let (json, bin) = checkpoint_paths(path);
    inputs.insert(format!("ckpt/{}", checkpoint::MANIFEST_FILE), sha256_file(&json)?);
    inputs.insert(format!("ckpt/{}", checkpoint::BLOB_FILE), sha256_file(&bin)?);
    Ok(())
}

fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.extension().is_some_and(|e| e == "json") {
        (path.to_path_buf(), path.with_extension("bin"))
    } else {
        (path.join(checkpoint::MANIFEST_FILE), path.join(checkpoint::BLOB_FILE))
    }
}

fn load_model_config(path: Option<&Path>) -> Result<ModelConfig> {
    let cfg: ModelConfig = load_config(path)?;
    cfg.validate()?;
    cfg.validate_grid()?;
    Ok(cfg)
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg: TrainConfig = load_config(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec: CohortSpec = load_config(a.spec.as_deref())?;
    spec.validate()?;
    let shift = match &a.shift {
        Some(p) => Some(load_config::<ShiftSpec>(Some(p))?),
        None => None,
    };
    let mut data = generate_cohort(&spec)?;
    if let Some(s) = &shift {
        data = apply_shift(&data, s)?;
    }
    let m = write_dataset(&a.out, &data)?;
    println!(
        "wrote {}: patients {} visits {} features {} (dynamic {}, static {}) prevalence {:.4}",
        a.out.display(),
        m.patients,
        m.visits,
        m.features,
        spec.dynamic_features,
        spec.static_features,
        m.prevalence
    );
    Ok(())
}

fn write_history(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in &outcome.history {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let t0 = Instant::now();
    let model_cfg = load_model_config(a.model.as_deref())?;
    let train_cfg = load_train_config(a.train.as_deref())?;
    let data = read_dataset(&a.data)?;
    let mut inputs = BTreeMap::new();
    dataset_inputs("data", &a.data, &mut inputs)?;
    let prepared = prepare(&data, train_cfg.seed, train_cfg.target)?;
    let load_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let (outcome, grid) = if a.grid {
        let g = grid_search(
            &model_cfg,
            prepared.train.features(),
            &prepared.train,
            &prepared.valid,
            &train_cfg,
            &LR_GRID.map(|lr| (lr, train_cfg.tta_lr)),
            &prepared.defaults,
        )?;
        (g.outcome, Some((g.cells, g.best)))
    } else {
        let model = Model::new(model_cfg.clone(), prepared.train.features())?;
        (train(model, &prepared.train, &prepared.valid, &train_cfg, &prepared.defaults)?, None)
    };
    let train_secs = t1.elapsed().as_secs_f64();

    fs::create_dir_all(&a.out)?;
    let resolved_train = match &grid {
        Some((cells, best)) => TrainConfig {
            lr: cells[*best].lr,
            ..train_cfg.clone()
        },
        None => train_cfg.clone(),
    };
    let config = ResolvedConfig {
        model: Some(model_cfg),
        train: Some(resolved_train),
        cohort: Some(data.spec.clone()),
        shift: data.shift.clone(),
        eval: None,
    };
    let mut manifest = RunManifest::new("train", config, inputs)?;
    outcome.checkpoint.save(&a.out)?;
    write_history(&a.out.join("history.jsonl"), &outcome)?;
    manifest.artifacts = vec![
        checkpoint::MANIFEST_FILE.into(),
        checkpoint::BLOB_FILE.into(),
        "history.jsonl".into(),
    ];
    if let Some((cells, best)) = &grid {
        write_json(&a.out.join("grid.json"), &serde_json::json!({ "cells": cells, "best": best }))?;
        manifest.artifacts.push("grid.json".into());
    }
    let label = outcome.model.wiring.name().to_string();
    let mut cell = CellRecord::of_model(label.clone(), &outcome.model);
    cell.epochs = Some(outcome.history.len());
    cell.valid_auprc = outcome.checkpoint.best_valid_auprc;
    cell.tta_lr = train_cfg.tta_lr;
    manifest.cells.push(cell);
    manifest.timings.phases.insert("load".into(), load_secs);
    manifest.timings.phases.insert("train".into(), train_secs);
    manifest.timings.epoch_seconds.insert(label, outcome.epoch_seconds.clone());
    manifest.write(&a.out)?;
    println!(
        "trained {} for {} epochs: best valid AUPRC {:.4} at epoch {}; checkpoint in {}",
        outcome.model.wiring.name(),
        outcome.history.len(),
        outcome.best_valid_auprc(),
        outcome.checkpoint.epoch,
        a.out.display()
    );
    Ok(())
}

/// `none` or a positive rate.
pub fn parse_tta_lr(s: &str) -> Result<Option<f64>> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(Some(v)),
        _ => Err(Error::Config(format!("tta-lr must be 'none' or a positive number, got '{s}'"))),
    }
}

fn lr_label(lr: Option<f64>) -> String {
    lr.map_or_else(|| "none".into(), |v| format!("{v:e}"))
}

#[derive(Serialize)]
struct GatesFile<'a> {
    expert_load: &'a Option<ExpertLoadReport>,
    batches: &'a [GateProfile],
}

fn write_scores(path: &Path, ids: &[usize], labels: &[f64], scores: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "label", "score"])?;
    for ((id, y), s) in ids.iter().zip(labels).zip(scores) {
        w.write_record([id.to_string(), format!("{y}"), format!("{s:.16e}")])?;
    }
    w.flush()?;
    Ok(())
}

fn frozen_bytes(model: &Model) -> [Vec<u8>; 2] {
    [model.store.group_bytes(Group::Backbone), model.store.group_bytes(Group::Experts)]
}

fn inject_freeze_fault(model: &mut Model) {
    if std::env::var(FAULT_INJECT_ENV).is_ok_and(|v| v == "freeze") {
        if let Some(&id) = model.store.group_ids(Group::Experts).first() {
            model.store.get_mut(id)[[0, 0]] += 1.0;
        }
    }
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let t0 = Instant::now();
    let tta_lr = parse_tta_lr(&a.tta_lr)?;
    let order: StreamOrder = a.order.parse()?;
    if a.batch == 0 {
        return Err(Error::Config("batch must be at least 1".into()));
    }
    let mut inputs = BTreeMap::new();
    checkpoint_inputs(&a.ckpt, &mut inputs)?;
    dataset_inputs("data", &a.data, &mut inputs)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    if data.features() != ckpt.input_dim {
        return Err(Error::Data(format!(
            "dataset has {} features, checkpoint expects {}",
            data.features(),
            ckpt.input_dim
        )));
    }
    let set = match a.split {
        SplitChoice::All => data.labeled_all(&ckpt.impute_defaults, ckpt.target)?,
        SplitChoice::Test => {
            let split = stratified_split(&data.labels(ckpt.target), SPLIT_FRACTIONS, ckpt.split_seed)?;
            data.labeled_set(&split.test, &ckpt.impute_defaults, ckpt.target)?
        }
    };
    let mut model = ckpt.to_model()?;
    let reference = frozen_bytes(&model);
    let load_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let opts = StreamOptions {
        tta_lr,
        batch_size: a.batch,
        steps: a.steps,
    };
    let (evaluation, stream) = experiment::evaluate(&model, &set, &opts, order, a.resamples, a.seed)?;
    let stream_secs = t1.elapsed().as_secs_f64();

    inject_freeze_fault(&mut model);
    if frozen_bytes(&model) != reference {
        return Err(Error::Contract("theta_m or theta_e changed during streaming evaluation".into()));
    }
    let mut after = BTreeMap::new();
    checkpoint_inputs(&a.ckpt, &mut after)?;
    if after.iter().any(|(k, v)| inputs.get(k) != Some(v)) {
        return Err(Error::Contract("checkpoint file changed during evaluation".into()));
    }

    let out = match &a.out {
        Some(o) => o.clone(),
        None => checkpoint_paths(&a.ckpt)
            .0
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{}", lr_label(tta_lr))),
    };
    fs::create_dir_all(&out)?;
    write_json(&out.join("metrics.json"), &evaluation.metrics)?;
    write_scores(&out.join("scores.csv"), &set.ids, &set.y, &stream.scores)?;
    write_json(
        &out.join("gates.json"),
        &GatesFile {
            expert_load: &evaluation.expert_load,
            batches: &stream.gates,
        },
    )?;
    let config = ResolvedConfig {
        model: Some(ckpt.config.clone()),
        train: None,
        cohort: Some(data.spec.clone()),
        shift: data.shift.clone(),
        eval: Some(EvalSettings {
            tta_lr,
            batch: a.batch,
            order: a.order.clone(),
            split: a.split.name().into(),
            resamples: a.resamples,
            bootstrap_seed: a.seed,
        }),
    };
    let mut manifest = RunManifest::new("eval", config, inputs)?;
    manifest.artifacts = vec!["metrics.json".into(), "scores.csv".into(), "gates.json".into()];
    manifest.cells.push(eval_record(&model, &evaluation));
    manifest.timings.phases.insert("load".into(), load_secs);
    manifest.timings.phases.insert("stream".into(), stream_secs);
    manifest.write(&out)?;
    println!(
        "{} patients ({} positive), tta-lr {}: AUPRC {:.4}±{:.4} AUROC {:.4}±{:.4}; outputs in {}",
        evaluation.metrics.patients,
        evaluation.metrics.positives,
        lr_label(tta_lr),
        evaluation.metrics.auprc.point,
        evaluation.metrics.auprc.std,
        evaluation.metrics.auroc.point,
        evaluation.metrics.auroc.std,
        out.display()
    );
    Ok(())
}

fn eval_record(model: &Model, e: &Evaluation) -> CellRecord {
    CellRecord {
        tta_lr: e.tta_lr,
        auprc: Some((e.metrics.auprc.point, e.metrics.auprc.std)),
        auroc: Some((e.metrics.auroc.point, e.metrics.auroc.std)),
        expert_entropy: e.expert_load.as_ref().map(|l| l.entropy),
        max_entropy: e.expert_load.as_ref().map(|l| l.max_entropy),
        recon_loss: e.recon_loss,
        ..CellRecord::of_model(lr_label(e.tta_lr), model)
    }
}

struct Loaded {
    data: Dataset,
    prepared: Prepared,
    model: ModelConfig,
    train: TrainConfig,
    inputs: BTreeMap<String, String>,
}

fn load_experiment(data_dir: &Path, model: Option<&Path>, train: Option<&Path>) -> Result<Loaded> {
    let model = load_model_config(model)?;
    let train = load_train_config(train)?;
    let data = read_dataset(data_dir)?;
    let mut inputs = BTreeMap::new();
    dataset_inputs("data", data_dir, &mut inputs)?;
    let prepared = prepare(&data, train.seed, train.target)?;
    Ok(Loaded {
        data,
        prepared,
        model,
        train,
        inputs,
    })
}

fn cells_manifest(command: &str, l: Loaded, runs: &[CellRun], load_secs: f64, run_secs: f64) -> Result<RunManifest> {
    let config = ResolvedConfig {
        model: Some(l.model),
        train: Some(l.train),
        cohort: Some(l.data.spec),
        shift: l.data.shift,
        eval: None,
    };
    let mut m = RunManifest::new(command, config, l.inputs)?;
    for r in runs {
        m.cells.push(CellRecord::of_cell(r));
        m.timings.epoch_seconds.insert(r.label.clone(), r.outcome.epoch_seconds.clone());
        m.timings.phases.insert(format!("{}/train", r.label), r.train_seconds);
    }
    m.timings.phases.insert("load".into(), load_secs);
    m.timings.phases.insert("cells".into(), run_secs);
    Ok(m)
}

fn write_cell_outputs(dir: &Path, runs: &[CellRun], manifest: &mut RunManifest, title: &str, table: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let summaries: Vec<_> = runs.iter().map(CellRun::summary).collect();
    write_json(&dir.join("summary.json"), &serde_json::json!({
        "cells": summaries,
        "best": experiment::argmax(&summaries),
    }))?;
    for r in runs {
        let sub = dir.join(&r.label);
        fs::create_dir_all(&sub)?;
        write_json(&sub.join("metrics.json"), &r.evaluation.metrics)?;
        write_history(&sub.join("history.jsonl"), &r.outcome)?;
    }
    manifest.artifacts = vec!["summary.json".into(), "report.md".into()];
    manifest.artifacts.extend(runs.iter().flat_map(|r| {
        [format!("{}/metrics.json", r.label), format!("{}/history.jsonl", r.label)]
    }));
    fs::write(dir.join("report.md"), markdown::report(title, &[&*manifest], table))?;
    manifest.write(dir)
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let t0 = Instant::now();
    let l = load_experiment(&a.data, a.model.as_deref(), a.train.as_deref())?;
    let load_secs = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let runs = experiment::ablate(&l.prepared, &l.model, &l.train, a.resamples)?;
    let run_secs = t1.elapsed().as_secs_f64();
    let mut manifest = cells_manifest("ablate", l, &runs, load_secs, run_secs)?;
    let table = format!("## Ablation\n\n{}", markdown::ablation_table(&manifest.cells));
    write_cell_outputs(&a.out, &runs, &mut manifest, "Ablation of the adaptive head", &table)?;
    for c in &manifest.cells {
        println!("{:<16} AUPRC {:.4}", c.label, c.auprc.map_or(f64::NAN, |v| v.0));
    }
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let t0 = Instant::now();
    let l = load_experiment(&a.data, a.model.as_deref(), a.train.as_deref())?;
    let load_secs = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let (runs, axis) = match a.axis {
        SweepAxis::Experts => {
            let grid: Vec<usize> = EXPERT_GRID.iter().copied().filter(|&e| e >= 2).collect();
            (experiment::sweep_experts(&l.prepared, &l.model, &l.train, &grid, a.resamples)?, "# Experts")
        }
        SweepAxis::TtaLr => (
            experiment::sweep_tta_lr(&l.prepared, &l.model, &l.train, &TTA_LR_GRID, a.resamples)?,
            "TTA LR",
        ),
    };
    let run_secs = t1.elapsed().as_secs_f64();
    let mut manifest = cells_manifest("sweep", l, &runs, load_secs, run_secs)?;
    let table = format!("## Sweep\n\n{}", markdown::sweep_table(axis, &manifest.cells));
    write_cell_outputs(&a.out, &runs, &mut manifest, "Sensitivity sweep", &table)?;
    let best = markdown::best_cell(&manifest.cells).map(|i| manifest.cells[i].label.clone());
    println!("best cell: {}", best.unwrap_or_else(|| "-".into()));
    Ok(())
}

fn cross_domain_cmd(a: &CrossDomainArgs) -> Result<()> {
    let t0 = Instant::now();
    let model_cfg = load_model_config(a.model.as_deref())?;
    let train_cfg = load_train_config(a.train.as_deref())?;
    let tta_lr = parse_tta_lr(&a.tta_lr.to_string())?;
    let source = read_dataset(&a.source)?;
    let target = read_dataset(&a.target)?;
    if source.features() != target.features() {
        return Err(Error::Data("source and target cohorts have different features".into()));
    }
    let mut inputs = BTreeMap::new();
    dataset_inputs("source", &a.source, &mut inputs)?;
    dataset_inputs("target", &a.target, &mut inputs)?;
    let prepared = prepare(&source, train_cfg.seed, train_cfg.target)?;
    let target_set = target.labeled_all(&prepared.defaults, train_cfg.target)?;
    let load_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let model = Model::new(model_cfg.clone(), prepared.train.features())?;
    let outcome = train(model, &prepared.train, &prepared.valid, &train_cfg, &prepared.defaults)?;
    let train_secs = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let reference = frozen_bytes(&outcome.model);
    let mut evals = Vec::new();
    for lr in [None, tta_lr] {
        let opts = StreamOptions {
            tta_lr: lr,
            batch_size: train_cfg.stream_batch,
            steps: train_cfg.tta_steps,
        };
        let (e, _) = experiment::evaluate(&outcome.model, &target_set, &opts, StreamOrder::Natural, a.resamples, train_cfg.seed)?;
        evals.push(e);
    }
    if frozen_bytes(&outcome.model) != reference {
        return Err(Error::Contract("theta_m or theta_e changed during streaming evaluation".into()));
    }
    let stream_secs = t2.elapsed().as_secs_f64();
    let significance = [Metric::Auprc, Metric::Auroc]
        .into_iter()
        .map(|m| {
            Significance::compare(
                m,
                ("frozen", evals[0].metrics.summary(m)),
                ("adapted", evals[1].metrics.summary(m)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut adapted = evals[1].metrics.clone();
    adapted.significance = significance.clone();

    fs::create_dir_all(&a.out)?;
    outcome.checkpoint.save(&a.out)?;
    write_history(&a.out.join("history.jsonl"), &outcome)?;
    write_json(&a.out.join("metrics.json"), &adapted)?;
    write_json(&a.out.join("metrics_frozen.json"), &evals[0].metrics)?;
    write_json(
        &a.out.join("cross_domain.json"),
        &serde_json::json!({ "frozen": evals[0], "adapted": evals[1], "significance": significance }),
    )?;
    let config = ResolvedConfig {
        model: Some(model_cfg),
        train: Some(train_cfg.clone()),
        cohort: Some(target.spec.clone()),
        shift: target.shift.clone(),
        eval: None,
    };
    let mut manifest = RunManifest::new("cross-domain", config, inputs)?;
    manifest.artifacts = [
        checkpoint::MANIFEST_FILE,
        checkpoint::BLOB_FILE,
        "history.jsonl",
        "metrics.json",
        "metrics_frozen.json",
        "cross_domain.json",
        "report.md",
    ]
    .map(String::from)
    .to_vec();
    let train_label = "source".to_string();
    let mut train_cell = CellRecord::of_model(train_label.clone(), &outcome.model);
    train_cell.epochs = Some(outcome.history.len());
    train_cell.valid_auprc = outcome.checkpoint.best_valid_auprc;
    manifest.cells.push(train_cell);
    for e in &evals {
        let mut c = eval_record(&outcome.model, e);
        c.label = format!("target, tta-lr {}", lr_label(e.tta_lr));
        manifest.cells.push(c);
    }
    manifest.timings.phases.insert("load".into(), load_secs);
    manifest.timings.phases.insert("train".into(), train_secs);
    manifest.timings.phases.insert("stream".into(), stream_secs);
    manifest.timings.epoch_seconds.insert(train_label, outcome.epoch_seconds.clone());
    let mut table = String::from("## Cross-domain\n\n| Setting | AUPRC | AUROC | mean l_s |\n|---|---|---|---|\n");
    for e in &evals {
        table += &format!(
            "| tta-lr {} | {:.2}±{:.2} | {:.2}±{:.2} | {} |\n",
            lr_label(e.tta_lr),
            100.0 * e.metrics.auprc.point,
            100.0 * e.metrics.auprc.std,
            100.0 * e.metrics.auroc.point,
            100.0 * e.metrics.auroc.std,
            e.recon_loss.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
        );
    }
    table += "\n| Metric | t (adapted - frozen) | p |\n|---|---|---|\n";
    for s in &significance {
        let t = s.t.map_or_else(|| "inf".into(), |t| format!("{t:.3}"));
        table += &format!("| {:?} | {t} | {:.3e} |\n", s.metric, s.p);
    }
    fs::write(
        a.out.join("report.md"),
        markdown::report("Cross-domain evaluation", &[&manifest], &table),
    )?;
    manifest.write(&a.out)?;
    for e in &evals {
        println!(
            "tta-lr {}: AUPRC {:.4} AUROC {:.4}",
            lr_label(e.tta_lr),
            e.metrics.auprc.point,
            e.metrics.auroc.point
        );
    }
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let manifests = a.runs.iter().map(|p| RunManifest::read(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&RunManifest> = manifests.iter().collect();
    let mut extra = String::from("## Runs\n\n| Run | command | input hash | artifacts |\n|---|---|---|---|\n");
    for m in &manifests {
        extra += &format!("| {} | {} | {} | {} |\n", m.run_id, m.command, &m.input_hash[..16], m.artifacts.join(", "));
    }
    let text = markdown::report("Experiment report", &refs, &extra);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, text)?;
    println!("wrote {} ({} runs)", a.out.display(), manifests.len());
    Ok(())
}

