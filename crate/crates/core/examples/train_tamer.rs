//! Trains a GRU backbone with the full adaptive head on a synthetic
//! cohort and reports test AUPRC with and without test-time adaptation.

use std::time::Instant;

use tamer::model::{Model, ModelConfig};
use tamer::synth::{feature_means, generate_cohort, stratified_split, CohortSpec, Target, SPLIT_FRACTIONS};
use tamer::train::{evaluate_stream, labels_u8, train, StreamOptions, StreamOrder, TrainConfig};

fn main() -> tamer::Result<()> {
    let spec = CohortSpec::default();
    let data = generate_cohort(&spec)?;
    let split = stratified_split(&data.labels(Target::Mortality), SPLIT_FRACTIONS, 0)?;
    let defaults = feature_means(split.train.iter().map(|&i| &data.patients[i].x), data.features());
    let tr = data.labeled_set(&split.train, &defaults, Target::Mortality)?;
    let va = data.labeled_set(&split.valid, &defaults, Target::Mortality)?;
    let te = data.labeled_set(&split.test, &defaults, Target::Mortality)?;

    let cfg = ModelConfig {
        experts: 4,
        ..ModelConfig::default()
    };
    let max_epochs = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(100);
    let train_cfg = TrainConfig {
        lr: 1e-2,
        max_epochs,
        patience: 10.min(max_epochs - 1),
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let out = train(Model::new(cfg, data.features())?, &tr, &va, &train_cfg, &defaults)?;
    println!(
        "trained {} epochs in {:.1}s (best epoch {}, valid AUPRC {:.4})",
        out.history.len(),
        started.elapsed().as_secs_f64(),
        out.checkpoint.epoch,
        out.best_valid_auprc()
    );
    let y = labels_u8(&te);
    for lr in [None, Some(1e-5)] {
        let opts = StreamOptions {
            tta_lr: lr,
            batch_size: 1024,
            steps: 1,
        };
        let r = evaluate_stream(&out.model, &te, &opts, StreamOrder::Natural)?;
        println!(
            "tta_lr {:?}: test AUPRC {:.4}, AUROC {:.4}",
            lr,
            tamer::metrics::auprc(&r.scores, &y)?,
            tamer::metrics::auroc(&r.scores, &y)?
        );
    }
    Ok(())
}
