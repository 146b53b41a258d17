//! Generates a subgroup-structured cohort, applies a covariate shift,
//! writes both to disk and prints per-subgroup prevalence.

use tamer::synth::{apply_shift, generate_cohort, read_dataset, stratified_split, write_dataset, CohortSpec, ShiftSpec, Target, SPLIT_FRACTIONS};

fn main() -> tamer::Result<()> {
    let spec = CohortSpec {
        patients: 2000,
        ..CohortSpec::default()
    };
    let data = generate_cohort(&spec)?;
    println!(
        "{} patients, {} visits, {} features, prevalence {:.4}",
        data.len(),
        spec.visits,
        data.features(),
        data.prevalence()
    );
    for k in 0..spec.subgroups {
        let members: Vec<_> = data.patients.iter().filter(|p| p.subgroup == k).collect();
        let pos = members.iter().filter(|p| p.label == 1).count();
        println!("  subgroup {k}: {} patients, prevalence {:.4}", members.len(), pos as f64 / members.len() as f64);
    }
    let missing = data.patients.iter().flat_map(|p| p.x.iter()).filter(|v| v.is_nan()).count();
    let cells = data.len() * spec.visits * spec.dynamic_features;
    println!("missing cells {:.3}", missing as f64 / cells as f64);

    let split = stratified_split(&data.labels(Target::Mortality), SPLIT_FRACTIONS, 0)?;
    println!("split {} / {} / {}", split.train.len(), split.valid.len(), split.test.len());

    let shift = ShiftSpec {
        offset: vec![0.5],
        scale: vec![1.5],
        prior_weights: vec![0.2, 1.0, 3.0],
        ..ShiftSpec::default()
    };
    let shifted = apply_shift(&data, &shift)?;
    println!("shifted cohort prevalence {:.4}", shifted.prevalence());

    let dir = std::env::temp_dir().join("tamer-synthetic-cohort");
    write_dataset(&dir, &shifted)?;
    let back = read_dataset(&dir)?;
    // NaN marks missing cells, so compare bit patterns.
    let identical = back.patients.iter().zip(&shifted.patients).all(|(a, b)| {
        a.label == b.label && a.x.iter().zip(b.x.iter()).all(|(u, v)| u.to_bits() == v.to_bits())
    });
    println!("round trip through {}: identical = {identical}", dir.display());
    Ok(())
}
