//! Parameter counts per group across the hidden-size and expert grids,
//! and the per-epoch training cost of the head over a bare backbone.

use std::time::Instant;

use tamer::experiment::prepare;
use tamer::model::{Model, ModelConfig, Wiring, EXPERT_GRID, HIDDEN_GRID};
use tamer::moe::moe_param_count;
use tamer::params::Group;
use tamer::synth::{generate_cohort, CohortSpec, Target};
use tamer::train::{train, TrainConfig};
use tamer::tta::tta_param_count;

fn main() -> tamer::Result<()> {
    let input = 14;
    println!("{:>4} {:>3} {:>8} {:>8} {:>8}  analytic theta_s / moe", "H", "E", "theta_m", "theta_s", "theta_e");
    for h in HIDDEN_GRID {
        for e in EXPERT_GRID {
            let m = Model::new(
                ModelConfig {
                    hidden: h,
                    experts: e,
                    ..ModelConfig::default()
                },
                input,
            )?;
            let [bm, bs, be] = Group::ALL.map(|g| m.store.count(g));
            println!(
                "{h:>4} {e:>3} {bm:>8} {bs:>8} {be:>8}  {} / {}",
                tta_param_count(h, h / 2),
                moe_param_count(h, e)
            );
        }
    }

    let data = generate_cohort(&CohortSpec {
        patients: 2000,
        ..CohortSpec::default()
    })?;
    let p = prepare(&data, 0, Target::Mortality)?;
    let tc = TrainConfig {
        max_epochs: 5,
        patience: 5,
        ..TrainConfig::default()
    };
    let mut base = None;
    for w in [Wiring::BackboneOnly, Wiring::TtaBeforeMoe] {
        let cfg = w.apply(&ModelConfig::default());
        let started = Instant::now();
        let out = train(Model::new(cfg, p.train.features())?, &p.train, &p.valid, &tc, &p.defaults)?;
        let per_epoch = out.epoch_seconds.iter().sum::<f64>() / out.epoch_seconds.len() as f64;
        let delta = base.map_or(0.0, |b| per_epoch - b);
        base.get_or_insert(per_epoch);
        println!(
            "{:<16} {:.3} s/epoch (delta {delta:+.3} s), total {:.1} s",
            w.name(),
            per_epoch,
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
