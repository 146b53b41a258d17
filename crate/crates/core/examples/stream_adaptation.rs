//! Trains on a source cohort, then streams a shifted cohort batch by
//! batch with different test-time learning rates. Only the test-time layer
//! moves; the backbone and experts stay byte-identical.

use tamer::experiment::prepare;
use tamer::model::{Model, ModelConfig};
use tamer::params::Group;
use tamer::synth::{apply_shift, generate_cohort, CohortSpec, ShiftSpec, Target};
use tamer::train::{evaluate_stream, labels_u8, train, StreamOptions, StreamOrder, TrainConfig};

fn main() -> tamer::Result<()> {
    let source = generate_cohort(&CohortSpec {
        patients: 2000,
        ..CohortSpec::default()
    })?;
    let target = apply_shift(
        &source,
        &ShiftSpec {
            offset: vec![0.5],
            scale: vec![1.5],
            ..ShiftSpec::default()
        },
    )?;
    let p = prepare(&source, 0, Target::Mortality)?;
    let cfg = ModelConfig {
        experts: 4,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        lr: 1e-2,
        max_epochs: 20,
        patience: 5,
        ..TrainConfig::default()
    };
    let out = train(Model::new(cfg, p.train.features())?, &p.train, &p.valid, &tc, &p.defaults)?;
    let model = &out.model;
    let set = target.labeled_all(&p.defaults, Target::Mortality)?;
    let y = labels_u8(&set);
    let frozen = [Group::Backbone, Group::Experts].map(|g| model.store.group_bytes(g));

    for lr in [None, Some(1e-5), Some(1e-4), Some(1e-3)] {
        let opts = StreamOptions {
            tta_lr: lr,
            batch_size: 64,
            steps: 1,
        };
        let r = evaluate_stream(model, &set, &opts, StreamOrder::Natural)?;
        let state = r.state.as_ref().expect("full model adapts");
        let drift = state.params.max_abs_diff(&model.store.snapshot(Group::Tta));
        let first = r.recon_loss_pre.first().copied().unwrap_or(f64::NAN);
        let last = r.recon_loss_pre.last().copied().unwrap_or(f64::NAN);
        println!(
            "tta_lr {:>8}: {} batches, l_s first {first:.6} last {last:.6} mean {:.6}, theta_s drift {drift:.2e}, AUPRC {:.4}",
            lr.map_or_else(|| "none".into(), |v| format!("{v:e}")),
            r.recon_loss_pre.len(),
            r.mean_recon_loss_pre().unwrap_or(f64::NAN),
            tamer::metrics::auprc(&r.scores, &y)?
        );
    }
    let unchanged = frozen == [Group::Backbone, Group::Experts].map(|g| model.store.group_bytes(g));
    println!("theta_m and theta_e unchanged: {unchanged}");
    Ok(())
}
