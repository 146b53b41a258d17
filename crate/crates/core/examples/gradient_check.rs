//! Checks reverse-mode gradients of the composed model (GRU, test-time
//! layer, experts, head) against central finite differences.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tamer::autodiff::{finite_difference, max_relative_error, NodeId, Tape};
use tamer::batch::Batch;
use tamer::model::{Model, ModelConfig, Wiring};
use tamer::params::ParameterStore;

fn main() -> tamer::Result<()> {
    let (n, t, f) = (4, 5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<Array2<f64>> = (0..n)
        .map(|_| Array2::from_shape_fn((t, f), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let refs: Vec<&Array2<f64>> = xs.iter().collect();
    let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let batch = Batch::from_matrices(&refs, Some(&y), (0..n).collect())?;

    for wiring in Wiring::ALL {
        let cfg = wiring.apply(&ModelConfig {
            hidden: 8,
            experts: 2,
            ..ModelConfig::default()
        });
        let model = Model::new(cfg, f)?;
        let labels = batch.labels.clone().expect("batch has labels");
        let loss = |p: &ParameterStore, tape: &mut Tape| -> tamer::Result<NodeId> {
            let nodes = model.record(tape, p, &batch)?;
            let lm = tape.bce_with_logits(nodes.logits, labels.clone())?;
            match nodes.recon_loss {
                Some(ls) => tape.add(lm, ls),
                None => Ok(lm),
            }
        };
        let mut tape = Tape::new();
        let root = loss(&model.store, &mut tape)?;
        let ids = model.store.ids();
        let ad = tape.backward(root, &ids)?;
        // Stop-gradient inputs stay at their recorded values while the
        // parameters are perturbed.
        let frozen = tape.detached_values();
        let fd = finite_difference(
            |p| {
                let mut t = Tape::replaying(frozen.clone());
                let l = loss(p, &mut t)?;
                Ok(t.scalar(l))
            },
            &model.store,
            &ids,
            1e-6,
        )?;
        println!(
            "{:<16} {:>5} parameters  max relative error {:.2e}",
            wiring.name(),
            model.store.total_count(),
            max_relative_error(&ad, &fd)
        );
    }
    Ok(())
}
