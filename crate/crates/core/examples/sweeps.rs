//! Sensitivity sweeps over the number of experts and the test-time
//! learning rate; the best cell by test AUPRC is marked.

use tamer::experiment::{argmax, prepare, sweep_experts, sweep_tta_lr, CellRun};
use tamer::model::ModelConfig;
use tamer::synth::{generate_cohort, CohortSpec, Target};
use tamer::train::{TrainConfig, TTA_LR_GRID};

fn show(title: &str, runs: &[CellRun]) {
    let cells: Vec<_> = runs.iter().map(CellRun::summary).collect();
    let best = argmax(&cells);
    println!("{title}");
    for (i, c) in cells.iter().enumerate() {
        let mark = if best == Some(i) { "*" } else { " " };
        let entropy = c.expert_entropy.map_or_else(|| "-".into(), |h| format!("{h:.3}"));
        println!("{mark} {:<8} AUPRC {:.4} AUROC {:.4} gate entropy {entropy}", c.label, c.test_auprc, c.test_auroc);
    }
}

fn main() -> tamer::Result<()> {
    let data = generate_cohort(&CohortSpec {
        patients: 1500,
        ..CohortSpec::default()
    })?;
    let p = prepare(&data, 0, Target::Mortality)?;
    let base = ModelConfig::default();
    let tc = TrainConfig {
        lr: 1e-2,
        max_epochs: 10,
        patience: 4,
        stream_batch: 128,
        ..TrainConfig::default()
    };
    show("experts", &sweep_experts(&p, &base, &tc, &[2, 4, 8, 16, 32], 100)?);
    show("test-time learning rate", &sweep_tta_lr(&p, &base, &tc, &TTA_LR_GRID, 100)?);
    Ok(())
}
