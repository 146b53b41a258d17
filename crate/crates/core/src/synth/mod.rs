//! Synthetic EHR cohorts with latent patient subgroups.
//!
//! Each subgroup has its own stable linear dynamics for the dynamic
//! features, its own static-feature means and its own outcome weights, so
//! which features predict the outcome depends on the (hidden) subgroup.

mod impute;
mod io;
mod split;

pub use impute::{feature_means, locf_impute};
pub use io::{read_dataset, write_dataset, DatasetManifest};
pub use split::{stratified_split, Split, SPLIT_FRACTIONS};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::LabeledSet;
use crate::error::{Error, Result};
use crate::rng::{indexed_substream, stream, substream, StreamRng};

/// Spectral-ish bound on the per-subgroup transition matrices (max row
/// sum of absolute values).
const MAX_TRANSITION_NORM: f64 = 0.9;
const STRUCTURE_STREAM: &str = "data/structure";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub patients: usize,
    pub visits: usize,
    pub dynamic_features: usize,
    pub static_features: usize,
    pub subgroups: usize,
    /// Subgroup prior; uniform when empty.
    pub prior: Vec<f64>,
    pub missingness: f64,
    pub label_noise: f64,
    pub prevalence: f64,
    /// Scale of the outcome weights; larger values give cleaner labels.
    pub signal: f64,
    /// Distance between subgroup mean trajectories.
    pub separation: f64,
    /// Standard deviation of the per-visit process noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            patients: 6000,
            visits: 12,
            dynamic_features: 12,
            static_features: 2,
            subgroups: 3,
            prior: Vec::new(),
            missingness: 0.1,
            label_noise: 0.0,
            prevalence: 0.10,
            signal: 4.0,
            separation: 1.5,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn features(&self) -> usize {
        self.dynamic_features + self.static_features
    }

    /// Prior normalised to the simplex.
    pub fn normalized_prior(&self) -> Result<Vec<f64>> {
        if self.prior.is_empty() {
            return Ok(vec![1.0 / self.subgroups as f64; self.subgroups]);
        }
        if self.prior.len() != self.subgroups {
            return Err(Error::Config(format!(
                "prior has {} entries for {} subgroups",
                self.prior.len(),
                self.subgroups
            )));
        }
        normalize(&self.prior, "prior")
    }

    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 || self.visits == 0 {
            return Err(Error::Config("cohort needs at least one patient and one visit".into()));
        }
        if self.dynamic_features == 0 {
            return Err(Error::Config("cohort needs at least one dynamic feature".into()));
        }
        if self.subgroups == 0 {
            return Err(Error::Config("cohort needs at least one subgroup".into()));
        }
        if !(0.0..1.0).contains(&self.missingness) {
            return Err(Error::Config(format!("invalid missingness {}", self.missingness)));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config(format!("invalid label noise {}", self.label_noise)));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config(format!("invalid prevalence {}", self.prevalence)));
        }
        for (name, v) in [("signal", self.signal), ("separation", self.separation), ("noise", self.noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("invalid {name} {v}")));
            }
        }
        self.normalized_prior().map(|_| ())
    }
}

fn normalize(p: &[f64], what: &str) -> Result<Vec<f64>> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Config(format!("{what} entries must be nonnegative")));
    }
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config(format!("{what} has no mass")));
    }
    Ok(p.iter().map(|v| v / total).collect())
}

/// Covariate shift applied to a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    /// Per-feature offset; empty means zero, one entry is broadcast.
    pub offset: Vec<f64>,
    /// Per-feature scale; empty means one, one entry is broadcast.
    pub scale: Vec<f64>,
    /// Multiplicative reweighting of the subgroup prior; empty keeps it.
    pub prior_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            offset: Vec::new(),
            scale: Vec::new(),
            prior_weights: Vec::new(),
            seed: 1,
        }
    }
}

fn per_feature(v: &[f64], f: usize, empty: f64, what: &str) -> Result<Vec<f64>> {
    match v.len() {
        0 => Ok(vec![empty; f]),
        1 => Ok(vec![v[0]; f]),
        n if n == f => Ok(v.to_vec()),
        n => Err(Error::Config(format!("{what} has {n} entries for {f} features"))),
    }
}

impl ShiftSpec {
    pub fn offsets(&self, features: usize) -> Result<Vec<f64>> {
        let o = per_feature(&self.offset, features, 0.0, "shift offset")?;
        if o.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("shift offset must be finite".into()));
        }
        Ok(o)
    }

    pub fn scales(&self, features: usize) -> Result<Vec<f64>> {
        let s = per_feature(&self.scale, features, 1.0, "shift scale")?;
        if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("shift scale must be positive".into()));
        }
        Ok(s)
    }

    pub fn prior(&self, base: &[f64]) -> Result<Vec<f64>> {
        if self.prior_weights.is_empty() {
            return Ok(base.to_vec());
        }
        if self.prior_weights.len() != base.len() {
            return Err(Error::Config(format!(
                "prior weights have {} entries for {} subgroups",
                self.prior_weights.len(),
                base.len()
            )));
        }
        let w: Vec<f64> = base.iter().zip(&self.prior_weights).map(|(p, w)| p * w).collect();
        normalize(&w, "shifted prior")
    }
}

/// One generated patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: usize,
    /// `T x F` visits, dynamic features then broadcast statics; NaN marks
    /// a missing cell.
    pub x: Array2<f64>,
    pub statics: Vec<f64>,
    pub label: u8,
    /// Second outcome drawn from an independent weight vector.
    pub readmission: u8,
    pub subgroup: usize,
}

/// Outcome used as the training target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    Mortality,
    Readmission,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: CohortSpec,
    pub shift: Option<ShiftSpec>,
    pub patients: Vec<PatientRecord>,
    /// Calibrated outcome intercepts, reused when generating shifted data.
    pub bias: f64,
    pub readmission_bias: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn features(&self) -> usize {
        self.spec.features()
    }

    pub fn labels(&self, target: Target) -> Vec<u8> {
        self.patients
            .iter()
            .map(|p| match target {
                Target::Mortality => p.label,
                Target::Readmission => p.readmission,
            })
            .collect()
    }

    pub fn prevalence(&self) -> f64 {
        let pos = self.patients.iter().filter(|p| p.label == 1).count();
        pos as f64 / self.len().max(1) as f64
    }

    pub fn feature_names(&self) -> Vec<String> {
        feature_names(&self.spec)
    }

    /// LOCF-imputed inputs and labels of the patients at `indices`.
    pub fn labeled_set(&self, indices: &[usize], defaults: &[f64], target: Target) -> Result<LabeledSet> {
        let mut x = Vec::with_capacity(indices.len());
        let mut y = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self
                .patients
                .get(i)
                .ok_or_else(|| Error::Contract(format!("patient index {i} out of range")))?;
            x.push(locf_impute(&p.x, defaults)?);
            y.push(f64::from(match target {
                Target::Mortality => p.label,
                Target::Readmission => p.readmission,
            }));
            ids.push(p.id);
        }
        LabeledSet::new(x, y, ids)
    }

    /// Every patient, imputed with `defaults`.
    pub fn labeled_all(&self, defaults: &[f64], target: Target) -> Result<LabeledSet> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.labeled_set(&all, defaults, target)
    }
}

pub fn feature_names(spec: &CohortSpec) -> Vec<String> {
    (0..spec.dynamic_features)
        .map(|i| format!("dyn_{i}"))
        .chain((0..spec.static_features).map(|i| format!("stat_{i}")))
        .collect()
}

/// Fixed generative parameters of a cohort, derived from `spec.seed`.
#[derive(Debug, Clone)]
struct Structure {
    mean: Vec<Array1<f64>>,
    transition: Vec<Array2<f64>>,
    static_mean: Vec<Array1<f64>>,
    weights: Vec<Array1<f64>>,
    readmission_weights: Vec<Array1<f64>>,
}

fn normal_vec(rng: &mut StreamRng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

impl Structure {
    fn new(spec: &CohortSpec) -> Self {
        let mut rng = substream(spec.seed, STRUCTURE_STREAM);
        let (fd, k) = (spec.dynamic_features, spec.subgroups);
        let summary = 2 * fd + spec.static_features;
        let w_scale = spec.signal / (summary as f64).sqrt();
        let mut s = Structure {
            mean: Vec::new(),
            transition: Vec::new(),
            static_mean: Vec::new(),
            weights: Vec::new(),
            readmission_weights: Vec::new(),
        };
        for _ in 0..k {
            s.mean.push(normal_vec(&mut rng, fd, spec.separation));
            let mut a = Array2::from_shape_fn((fd, fd), |_| 0.15 * rng.sample::<f64, _>(StandardNormal));
            for i in 0..fd {
                a[[i, i]] += rng.random_range(0.3..0.8);
            }
            for mut row in a.rows_mut() {
                let norm: f64 = row.iter().map(|v| v.abs()).sum();
                if norm > MAX_TRANSITION_NORM {
                    row.mapv_inplace(|v| v * MAX_TRANSITION_NORM / norm);
                }
            }
            s.transition.push(a);
            s.static_mean.push(normal_vec(&mut rng, spec.static_features, spec.separation));
            s.weights.push(normal_vec(&mut rng, summary, w_scale));
            s.readmission_weights.push(normal_vec(&mut rng, summary, w_scale));
        }
        s
    }
}

/// Latent draw of one patient before labels are thresholded.
struct Draw {
    record: PatientRecord,
    logit: f64,
    readmission_logit: f64,
    u: f64,
    u_readmission: f64,
}

fn sample_category(rng: &mut StreamRng, prior: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    prior.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn draw_patient(spec: &CohortSpec, s: &Structure, prior: &[f64], root: u64, id: usize) -> Draw {
    let mut rng = indexed_substream(root, stream::DATA, id as u64);
    let (t, fd, fs) = (spec.visits, spec.dynamic_features, spec.static_features);
    let k = sample_category(&mut rng, prior);
    let mu = &s.mean[k];
    let mut state = mu + &normal_vec(&mut rng, fd, 1.0);
    let mut dynamic = Array2::zeros((t, fd));
    for step in 0..t {
        if step > 0 {
            let dev = &state - mu;
            state = mu + &s.transition[k].dot(&dev) + &normal_vec(&mut rng, fd, spec.noise);
        }
        dynamic.row_mut(step).assign(&state);
    }
    let statics = &s.static_mean[k] + &normal_vec(&mut rng, fs, 1.0);

    let mut summary = Vec::with_capacity(2 * fd + fs);
    summary.extend(dynamic.columns().into_iter().map(|c| c.mean().unwrap_or(0.0)));
    summary.extend(dynamic.row(t - 1).iter().copied());
    summary.extend(statics.iter().copied());
    let summary = Array1::from(summary);

    let mut x = Array2::zeros((t, fd + fs));
    for step in 0..t {
        for j in 0..fd {
            let missing = spec.missingness > 0.0 && rng.random::<f64>() < spec.missingness;
            x[[step, j]] = if missing { f64::NAN } else { dynamic[[step, j]] };
        }
        for j in 0..fs {
            x[[step, fd + j]] = statics[j];
        }
    }
    let u = rng.random();
    let u_readmission = rng.random();
    Draw {
        record: PatientRecord {
            id,
            x,
            statics: statics.to_vec(),
            label: 0,
            readmission: 0,
            subgroup: k,
        },
        logit: s.weights[k].dot(&summary),
        readmission_logit: s.readmission_weights[k].dot(&summary),
        u,
        u_readmission,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn outcome(u: f64, logit: f64, bias: f64, noise: f64) -> u8 {
    u8::from(u < noise + (1.0 - 2.0 * noise) * sigmoid(logit + bias))
}

fn positive_rate(logits: &[f64], us: &[f64], bias: f64, noise: f64) -> f64 {
    let pos = logits
        .iter()
        .zip(us)
        .filter(|(&l, &u)| outcome(u, l, bias, noise) == 1)
        .count();
    pos as f64 / logits.len() as f64
}

/// Intercept whose empirical positive rate is closest to `target`.
fn calibrate(logits: &[f64], us: &[f64], target: f64, noise: f64) -> Result<f64> {
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if positive_rate(logits, us, mid, noise) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = [lo, hi]
        .into_iter()
        .min_by(|a, b| {
            let da = (positive_rate(logits, us, *a, noise) - target).abs();
            let db = (positive_rate(logits, us, *b, noise) - target).abs();
            da.total_cmp(&db)
        })
        .expect("two candidates");
    let rate = positive_rate(logits, us, best, noise);
    if (rate - target).abs() > 0.02 {
        return Err(Error::Generation(format!(
            "prevalence {target} unreachable; closest achievable rate {rate:.4}"
        )));
    }
    Ok(best)
}

fn generate_with(spec: &CohortSpec, prior: &[f64], root: u64, bias: Option<(f64, f64)>) -> Result<Dataset> {
    let structure = Structure::new(spec);
    let draws: Vec<Draw> = (0..spec.patients)
        .map(|id| draw_patient(spec, &structure, prior, root, id))
        .collect();
    let (bias, readmission_bias) = match bias {
        Some(b) => b,
        None => {
            let l: Vec<f64> = draws.iter().map(|d| d.logit).collect();
            let u: Vec<f64> = draws.iter().map(|d| d.u).collect();
            let lr: Vec<f64> = draws.iter().map(|d| d.readmission_logit).collect();
            let ur: Vec<f64> = draws.iter().map(|d| d.u_readmission).collect();
            (
                calibrate(&l, &u, spec.prevalence, spec.label_noise)?,
                calibrate(&lr, &ur, spec.prevalence, spec.label_noise)?,
            )
        }
    };
    let patients = draws
        .into_iter()
        .map(|d| {
            let mut r = d.record;
            r.label = outcome(d.u, d.logit, bias, spec.label_noise);
            r.readmission = outcome(d.u_readmission, d.readmission_logit, readmission_bias, spec.label_noise);
            r
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        shift: None,
        patients,
        bias,
        readmission_bias,
    })
}

/// Generates a cohort; a pure function of `spec`.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Dataset> {
    spec.validate()?;
    let prior = spec.normalized_prior()?;
    generate_with(spec, &prior, spec.seed, None)
}

/// New patients from the structural model of `dataset`, drawn with
/// `shift.seed` under the reweighted prior, labelled with the source
/// intercepts, then transformed as `x' = (x + offset) * scale`.
pub fn apply_shift(dataset: &Dataset, shift: &ShiftSpec) -> Result<Dataset> {
    let f = dataset.features();
    let offset = shift.offsets(f)?;
    let scale = shift.scales(f)?;
    let prior = shift.prior(&dataset.spec.normalized_prior()?)?;
    let mut out = generate_with(
        &dataset.spec,
        &prior,
        shift.seed,
        Some((dataset.bias, dataset.readmission_bias)),
    )?;
    for p in &mut out.patients {
        for mut row in p.x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v + offset[j]) * scale[j];
            }
        }
        let fd = dataset.spec.dynamic_features;
        for (j, v) in p.statics.iter_mut().enumerate() {
            *v = (*v + offset[fd + j]) * scale[fd + j];
        }
    }
    out.shift = Some(shift.clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CohortSpec {
        CohortSpec {
            patients: 300,
            visits: 5,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_cohort(&tiny()).unwrap();
        let b = generate_cohort(&tiny()).unwrap();
        for (p, q) in a.patients.iter().zip(&b.patients) {
            assert_eq!(p.label, q.label);
            assert!(p.x.iter().zip(q.x.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(a.bias.to_bits(), b.bias.to_bits());
    }

    #[test]
    fn prevalence_is_calibrated() {
        let spec = CohortSpec {
            patients: 10_000,
            visits: 4,
            ..CohortSpec::default()
        };
        let d = generate_cohort(&spec).unwrap();
        let rate = d.prevalence();
        assert!((0.08..=0.12).contains(&rate), "{rate}");
        let r = d.labels(Target::Readmission).iter().filter(|&&v| v == 1).count() as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&r), "{r}");
    }

    #[test]
    fn unreachable_prevalence_is_a_generation_error() {
        let spec = CohortSpec {
            label_noise: 0.3,
            prevalence: 0.05,
            ..tiny()
        };
        assert!(matches!(generate_cohort(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_prevalence_is_a_config_error() {
        let spec = CohortSpec {
            prevalence: 1.5,
            ..tiny()
        };
        let err = generate_cohort(&spec).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("invalid prevalence"));
    }

    #[test]
    fn missingness_only_hits_dynamic_cells() {
        let spec = CohortSpec {
            missingness: 0.5,
            ..tiny()
        };
        let d = generate_cohort(&spec).unwrap();
        let fd = spec.dynamic_features;
        let mut missing = 0usize;
        let mut total = 0usize;
        for p in &d.patients {
            for row in p.x.rows() {
                assert!(row.iter().skip(fd).all(|v| v.is_finite()));
                missing += row.iter().take(fd).filter(|v| v.is_nan()).count();
                total += fd;
            }
        }
        let rate = missing as f64 / total as f64;
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
    }

    #[test]
    fn identity_shift_with_source_seed_is_bit_identical() {
        let d = generate_cohort(&tiny()).unwrap();
        let shift = ShiftSpec {
            seed: d.spec.seed,
            ..ShiftSpec::default()
        };
        let s = apply_shift(&d, &shift).unwrap();
        for (p, q) in d.patients.iter().zip(&s.patients) {
            assert_eq!(p.label, q.label);
            assert_eq!(p.subgroup, q.subgroup);
            assert!(p.x.iter().zip(q.x.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn prior_fully_on_one_subgroup() {
        let d = generate_cohort(&tiny()).unwrap();
        let shift = ShiftSpec {
            prior_weights: vec![0.0, 1.0, 0.0],
            ..ShiftSpec::default()
        };
        let s = apply_shift(&d, &shift).unwrap();
        assert!(s.patients.iter().all(|p| p.subgroup == 1));
    }

    #[test]
    fn scale_shift_applies_per_feature() {
        let spec = CohortSpec {
            missingness: 0.0,
            ..tiny()
        };
        let d = generate_cohort(&spec).unwrap();
        let plain = apply_shift(&d, &ShiftSpec::default()).unwrap();
        let shift = ShiftSpec {
            offset: vec![1.0],
            scale: vec![2.0],
            ..ShiftSpec::default()
        };
        let s = apply_shift(&d, &shift).unwrap();
        for (p, q) in plain.patients.iter().zip(&s.patients) {
            for (a, b) in p.x.iter().zip(q.x.iter()) {
                assert_eq!((a + 1.0) * 2.0, *b);
            }
            assert_eq!(p.label, q.label);
        }
    }

    #[test]
    fn nonpositive_scale_is_rejected() {
        let d = generate_cohort(&tiny()).unwrap();
        let shift = ShiftSpec {
            scale: vec![-1.0],
            ..ShiftSpec::default()
        };
        assert!(matches!(apply_shift(&d, &shift), Err(Error::Config(_))));
    }

    #[test]
    fn transitions_are_contractive() {
        let s = Structure::new(&CohortSpec::default());
        for a in &s.transition {
            for row in a.rows() {
                assert!(row.iter().map(|v| v.abs()).sum::<f64>() <= MAX_TRANSITION_NORM + 1e-12);
            }
        }
    }
}
