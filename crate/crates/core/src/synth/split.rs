use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, substream};

pub const SPLIT_FRACTIONS: [f64; 3] = [0.7, 0.1, 0.2];

/// Patient indices of each partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified shuffle split of `labels` into train/valid/test.
///
/// Partition sizes are rounded from the overall count; positives are
/// allocated to each partition in proportion, so every partition's
/// prevalence is within one patient of the global rate.
pub fn stratified_split(labels: &[u8], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !f.is_finite() || *f <= 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must be positive and sum to 1, got {fractions:?}")));
    }
    let n = labels.len();
    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| labels[i] != 1).collect();
    let sizes = allocate(n, fractions);
    let pos_sizes = allocate(pos.len(), fractions);
    for (k, (&s, &p)) in sizes.iter().zip(&pos_sizes).enumerate() {
        let name = ["train", "valid", "test"][k];
        if p == 0 || s <= p {
            return Err(Error::Data(format!(
                "{name} split would lack a class ({p} positives of {s} patients)"
            )));
        }
    }
    let mut rng = substream(seed, stream::SPLIT);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut parts: Vec<Vec<usize>> = Vec::with_capacity(3);
    let (mut pi, mut ni) = (0, 0);
    for (&s, &p) in sizes.iter().zip(&pos_sizes) {
        let mut part: Vec<usize> = pos[pi..pi + p].to_vec();
        part.extend_from_slice(&neg[ni..ni + (s - p)]);
        part.sort_unstable();
        pi += p;
        ni += s - p;
        parts.push(part);
    }
    let test = parts.pop().expect("three parts");
    let valid = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok(Split { train, valid, test })
}

/// Rounds `n * f` for the later partitions and gives the remainder to
/// the first.
fn allocate(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let valid = (n as f64 * fractions[1]).round() as usize;
    let test = (n as f64 * fractions[2]).round() as usize;
    let test = test.min(n);
    let valid = valid.min(n - test);
    [n - valid - test, valid, test]
}
