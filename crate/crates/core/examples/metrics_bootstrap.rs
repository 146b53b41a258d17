//! AUROC, AUPRC with tied scores, stratified bootstrap and the paired
//! t-test on bootstrap replicates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tamer::metrics::{auprc, auroc, bootstrap, paired_t_test, Metric, MetricsReport, Significance};

fn main() -> tamer::Result<()> {
    let labels = [1u8, 0, 1, 0, 0, 1];
    let tied = [0.9, 0.9, 0.5, 0.5, 0.1, 0.1];
    println!("tied scores: AUROC {:.6} AUPRC {:.6}", auroc(&tied, &labels)?, auprc(&tied, &labels)?);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 500;
    let y: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.15)).collect();
    let weak: Vec<f64> = y.iter().map(|&v| f64::from(v) * 0.6 + rng.random::<f64>()).collect();
    let strong: Vec<f64> = y.iter().map(|&v| f64::from(v) * 1.2 + rng.random::<f64>()).collect();

    let b1 = bootstrap(&weak, &y, Metric::Auprc, 100, 0)?;
    let b2 = bootstrap(&weak, &y, Metric::Auprc, 100, 0)?;
    println!(
        "bootstrap AUPRC {:.4}±{:.4}, repeat identical: {}",
        b1.mean,
        b1.std,
        b1.resamples == b2.resamples
    );

    let base = MetricsReport::compute(&weak, &y, 100, 0)?;
    let cand = MetricsReport::compute(&strong, &y, 100, 0)?;
    for m in [Metric::Auprc, Metric::Auroc] {
        let s = Significance::compare(m, ("weak", base.summary(m)), ("strong", cand.summary(m)))?;
        println!(
            "{m:?}: weak {:.4} strong {:.4}, t {:?} p {:.2e}",
            base.summary(m).point,
            cand.summary(m).point,
            s.t,
            s.p
        );
    }
    let same = paired_t_test(&[0.5, 0.5, 0.5], &[0.5, 0.5, 0.5])?;
    println!("identical samples: t {} p {} (degenerate {})", same.t, same.p, same.degenerate);
    Ok(())
}
