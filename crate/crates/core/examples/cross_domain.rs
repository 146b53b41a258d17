//! Trains on one cohort and streams a differently generated one (new
//! seed, reweighted subgroups, scaled and offset features), frozen and
//! adapted, with a paired t-test over shared bootstrap seeds.

use tamer::experiment::{evaluate, prepare};
use tamer::metrics::{Metric, Significance};
use tamer::model::{Model, ModelConfig};
use tamer::synth::{apply_shift, generate_cohort, CohortSpec, ShiftSpec, Target};
use tamer::train::{train, StreamOptions, StreamOrder, TrainConfig};

fn main() -> tamer::Result<()> {
    let source = generate_cohort(&CohortSpec {
        patients: 2000,
        ..CohortSpec::default()
    })?;
    let target = apply_shift(
        &source,
        &ShiftSpec {
            offset: vec![0.3],
            scale: vec![1.3],
            prior_weights: vec![0.5, 1.0, 2.0],
            seed: 11,
        },
    )?;
    let p = prepare(&source, 0, Target::Mortality)?;
    let tc = TrainConfig {
        lr: 1e-2,
        max_epochs: 20,
        patience: 5,
        ..TrainConfig::default()
    };
    let cfg = ModelConfig {
        experts: 4,
        ..ModelConfig::default()
    };
    let out = train(Model::new(cfg, p.train.features())?, &p.train, &p.valid, &tc, &p.defaults)?;
    let set = target.labeled_all(&p.defaults, Target::Mortality)?;
    let mut evals = Vec::new();
    for lr in [None, Some(1e-5)] {
        let opts = StreamOptions {
            tta_lr: lr,
            batch_size: 64,
            steps: 1,
        };
        let (e, _) = evaluate(&out.model, &set, &opts, StreamOrder::Natural, 100, 0)?;
        println!(
            "tta_lr {:?}: AUPRC {:.4}±{:.4} AUROC {:.4}±{:.4} mean l_s {:.6}",
            lr,
            e.metrics.auprc.point,
            e.metrics.auprc.std,
            e.metrics.auroc.point,
            e.metrics.auroc.std,
            e.recon_loss.unwrap_or(f64::NAN)
        );
        evals.push(e);
    }
    for m in [Metric::Auprc, Metric::Auroc] {
        let s = Significance::compare(m, ("frozen", evals[0].metrics.summary(m)), ("adapted", evals[1].metrics.summary(m)))?;
        println!("{m:?}: t {:?} p {:.3e}", s.t, s.p);
    }
    Ok(())
}
