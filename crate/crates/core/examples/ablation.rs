//! Trains the five wirings (backbone only, test-time layer only, experts
//! only, layer before experts, layer after experts) on one split.

use tamer::experiment::{ablate, prepare};
use tamer::model::ModelConfig;
use tamer::synth::{generate_cohort, CohortSpec, Target};
use tamer::train::TrainConfig;

fn main() -> tamer::Result<()> {
    let data = generate_cohort(&CohortSpec {
        patients: 2000,
        ..CohortSpec::default()
    })?;
    let p = prepare(&data, 0, Target::Mortality)?;
    let base = ModelConfig {
        experts: 4,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        lr: 1e-2,
        max_epochs: 20,
        patience: 5,
        stream_batch: 128,
        ..TrainConfig::default()
    };
    println!("{:<16} {:>7} {:>7} {:>7} {:>9}", "wiring", "AUPRC", "AUROC", "epochs", "s/epoch");
    for run in ablate(&p, &base, &tc, 100)? {
        let s = run.summary();
        println!(
            "{:<16} {:>7.4} {:>7.4} {:>7} {:>9.3}",
            s.label,
            s.test_auprc,
            s.test_auroc,
            s.epochs,
            run.mean_epoch_seconds()
        );
    }
    Ok(())
}
