//! Dense softmax-gated mixture of experts and the prediction head.
//!
//! Every expert is evaluated for every patient; the gate mixes their
//! outputs convexly and the result is added back to the input:
//! `z = h + sum_e g_e(h) * expert_e(h)`.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamSource, ParameterStore};

/// Two-layer ReLU MLP, `H -> H -> H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub hidden: usize,
    /// `H x E`, no bias.
    pub gate: ParamId,
    pub experts: Vec<Expert>,
}

/// Affine map from the final representation to one logit per patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub hidden: usize,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct MoeNodes {
    pub output: NodeId,
    pub gates: NodeId,
}

/// Gate assignment of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateProfile {
    /// Mean gate mass per expert over the batch.
    pub mean: Vec<f64>,
    /// `N x E` per-patient gates.
    pub per_sample: Vec<Vec<f64>>,
}

impl GateProfile {
    pub fn from_gates(gates: &Array2<f64>) -> Self {
        let n = gates.nrows().max(1) as f64;
        let mean = gates.columns().into_iter().map(|c| c.sum() / n).collect();
        let per_sample = gates.rows().into_iter().map(|r| r.to_vec()).collect();
        Self { mean, per_sample }
    }

    pub fn experts(&self) -> usize {
        self.mean.len()
    }
}

/// Expert utilisation summary over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertLoadReport {
    /// Mean gate mass of each expert over all patients.
    pub mean: Vec<f64>,
    /// Standard deviation of each expert's gate mass over patients.
    pub std: Vec<f64>,
    /// Mean per-patient gate entropy, in `[0, ln E]`; lower means more
    /// specialised routing.
    pub entropy: f64,
    /// Entropy of the mean load vector.
    pub load_entropy: f64,
    pub max_entropy: f64,
    pub patients: usize,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn moe_param_count(hidden: usize, experts: usize) -> usize {
    hidden * experts + experts * (2 * hidden * hidden + 2 * hidden) + hidden + 1
}

impl MoeLayer {
    pub fn init<R: Rng>(hidden: usize, n_experts: usize, store: &mut ParameterStore, rng: &mut R) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        let g = Group::Experts;
        let gate = store.add_uniform("moe.gate", g, hidden, n_experts, hidden, rng);
        let experts = (0..n_experts)
            .map(|e| Expert {
                w1: store.add_uniform(format!("moe.expert{e}.w1"), g, hidden, hidden, hidden, rng),
                b1: store.add_uniform(format!("moe.expert{e}.b1"), g, 1, hidden, hidden, rng),
                w2: store.add_uniform(format!("moe.expert{e}.w2"), g, hidden, hidden, hidden, rng),
                b2: store.add_uniform(format!("moe.expert{e}.b2"), g, 1, hidden, hidden, rng),
            })
            .collect();
        Ok(Self { hidden, gate, experts })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn record(&self, tape: &mut Tape, src: &dyn ParamSource, input: NodeId) -> Result<MoeNodes> {
        let (n, h) = tape.value(input).dim();
        if h != self.hidden {
            return Err(Error::shape("moe input", (n, h), (n, self.hidden)));
        }
        let e = self.n_experts();
        let wg = src.param(self.gate);
        if wg.dim() != (h, e) {
            return Err(Error::shape("moe gate", wg.dim(), (h, e)));
        }
        let wg = tape.param(self.gate, wg)?;
        let logits = tape.matmul(input, wg)?;
        let gates = tape.softmax_rows(logits)?;
        let mut acc = input;
        for (i, ex) in self.experts.iter().enumerate() {
            let w1 = tape.param(ex.w1, src.param(ex.w1))?;
            let b1 = tape.param(ex.b1, src.param(ex.b1))?;
            let w2 = tape.param(ex.w2, src.param(ex.w2))?;
            let b2 = tape.param(ex.b2, src.param(ex.b2))?;
            let a = tape.matmul(input, w1)?;
            let a = tape.add_row(a, b1)?;
            let a = tape.relu(a)?;
            let o = tape.matmul(a, w2)?;
            let o = tape.add_row(o, b2)?;
            let g = tape.slice_cols(gates, i, i + 1)?;
            let weighted = tape.mul_col(o, g)?;
            acc = tape.add(acc, weighted)?;
        }
        Ok(MoeNodes { output: acc, gates })
    }
}

impl Head {
    pub fn init<R: Rng>(hidden: usize, store: &mut ParameterStore, rng: &mut R) -> Self {
        Self {
            hidden,
            w: store.add_uniform("head.w", Group::Experts, hidden, 1, hidden, rng),
            b: store.add_uniform("head.b", Group::Experts, 1, 1, hidden, rng),
        }
    }

    pub fn record(&self, tape: &mut Tape, src: &dyn ParamSource, z: NodeId) -> Result<NodeId> {
        let w = tape.param(self.w, src.param(self.w))?;
        let b = tape.param(self.b, src.param(self.b))?;
        let o = tape.matmul(z, w)?;
        tape.add_row(o, b)
    }
}

/// `(z, gates)` for plain values.
pub fn moe_forward(h: &Array2<f64>, layer: &MoeLayer, src: &dyn ParamSource) -> Result<(Array2<f64>, GateProfile)> {
    let mut tape = Tape::new();
    let input = tape.constant(h.clone())?;
    let nodes = layer.record(&mut tape, src, input)?;
    Ok((
        tape.value(nodes.output).clone(),
        GateProfile::from_gates(tape.value(nodes.gates)),
    ))
}

/// One logit per row of `z`.
pub fn predict_logit(z: &Array2<f64>, head: &Head, src: &dyn ParamSource) -> Result<Array1<f64>> {
    let mut tape = Tape::new();
    let input = tape.constant(z.clone())?;
    let out = head.record(&mut tape, src, input)?;
    Ok(tape.value(out).column(0).to_owned())
}

pub fn expert_load_report(profiles: &[GateProfile]) -> Result<ExpertLoadReport> {
    let rows: Vec<&Vec<f64>> = profiles.iter().flat_map(|p| p.per_sample.iter()).collect();
    if rows.is_empty() {
        return Err(Error::Contract("expert load report needs at least one gated patient".into()));
    }
    let e = rows[0].len();
    if rows.iter().any(|r| r.len() != e) {
        return Err(Error::Contract("gate profiles disagree on expert count".into()));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; e];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0; e];
    for r in &rows {
        for ((s, v), m) in std.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n).sqrt());
    let sample_entropy = rows.iter().map(|r| entropy(r)).sum::<f64>() / n;
    Ok(ExpertLoadReport {
        load_entropy: entropy(&mean),
        mean,
        std,
        entropy: sample_entropy,
        max_entropy: (e as f64).ln(),
        patients: rows.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(h: usize, e: usize, seed: u64) -> (ParameterStore, MoeLayer, Head, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let layer = MoeLayer::init(h, e, &mut store, &mut rng).unwrap();
        let head = Head::init(h, &mut store, &mut rng);
        (store, layer, head, rng)
    }

    fn random(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, h), |_| rng.random_range(-2.0..2.0))
    }

    fn expert_out(store: &ParameterStore, ex: &Expert, h: &Array2<f64>) -> Array2<f64> {
        let a = (h.dot(store.get(ex.w1)) + store.get(ex.b1)).mapv(|v: f64| v.max(0.0));
        a.dot(store.get(ex.w2)) + store.get(ex.b2)
    }

    #[test]
    fn param_count_formula() {
        let (store, _, _, _) = setup(8, 3, 0);
        assert_eq!(store.count(Group::Experts), moe_param_count(8, 3));
        assert_eq!(moe_param_count(8, 3), 8 * 3 + 3 * (128 + 16) + 9);
    }

    #[test]
    fn single_expert_is_plain_residual_mlp() {
        let (store, layer, _, mut rng) = setup(5, 1, 1);
        let h = random(&mut rng, 6, 5);
        let (z, gates) = moe_forward(&h, &layer, &store).unwrap();
        assert!(gates.per_sample.iter().all(|r| r == &vec![1.0]));
        let expected = &h + &expert_out(&store, &layer.experts[0], &h);
        for (a, b) in z.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_expert_outputs_give_identity() {
        let (mut store, layer, _, mut rng) = setup(5, 4, 2);
        for ex in &layer.experts {
            store.get_mut(ex.w2).fill(0.0);
            store.get_mut(ex.b2).fill(0.0);
        }
        let h = random(&mut rng, 7, 5);
        let (z, _) = moe_forward(&h, &layer, &store).unwrap();
        for (a, b) in z.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tied_experts_ignore_gate() {
        let (mut store, layer, _, mut rng) = setup(4, 2, 3);
        let src = layer.experts[0].clone();
        let dst = layer.experts[1].clone();
        for (s, d) in [(src.w1, dst.w1), (src.b1, dst.b1), (src.w2, dst.w2), (src.b2, dst.b2)] {
            let v = store.get(s).clone();
            *store.get_mut(d) = v;
        }
        let h = random(&mut rng, 5, 4);
        let (z1, _) = moe_forward(&h, &layer, &store).unwrap();
        store.get_mut(layer.gate).mapv_inplace(|v| v * 7.0 - 1.0);
        let (z2, _) = moe_forward(&h, &layer, &store).unwrap();
        let expected = &h + &expert_out(&store, &src, &h);
        for ((a, b), c) in z1.iter().zip(z2.iter()).zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn head_zero_weights() {
        let (mut store, _, head, mut rng) = setup(4, 1, 4);
        store.get_mut(head.w).fill(0.0);
        store.get_mut(head.b).fill(0.0);
        let z = random(&mut rng, 3, 4);
        let logits = predict_logit(&z, &head, &store).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        store.get_mut(head.b).fill(10.0);
        let logits = predict_logit(&z, &head, &store).unwrap();
        assert!(logits.iter().all(|&v| 1.0 / (1.0 + (-v).exp()) > 0.9999));
    }

    #[test]
    fn head_matches_manual_dot() {
        let (store, _, head, mut rng) = setup(6, 1, 5);
        let z = random(&mut rng, 4, 6);
        let logits = predict_logit(&z, &head, &store).unwrap();
        let w = store.get(head.w);
        let b = store.get(head.b)[[0, 0]];
        for (i, l) in logits.iter().enumerate() {
            let mut acc = b;
            for j in 0..6 {
                acc += z[[i, j]] * w[[j, 0]];
            }
            assert!((l - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_logit_shift_invariance() {
        // adding c to every gate logit column is a shift of each softmax row:
        // realised by adding a constant column direction through a ones feature.
        let (mut store, layer, head, mut rng) = setup(4, 3, 6);
        let mut h = random(&mut rng, 6, 4);
        h.column_mut(0).fill(1.0);
        let (z1, g1) = moe_forward(&h, &layer, &store).unwrap();
        store.get_mut(layer.gate).row_mut(0).mapv_inplace(|v| v + 3.5);
        let (z2, g2) = moe_forward(&h, &layer, &store).unwrap();
        for (a, b) in g1.per_sample.iter().flatten().zip(g2.per_sample.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in z1.iter().zip(z2.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let l1 = predict_logit(&z1, &head, &store).unwrap();
        let l2 = predict_logit(&z2, &head, &store).unwrap();
        for (a, b) in l1.iter().zip(l2.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, layer, head, mut rng) = setup(4, 3, 7);
        let h = random(&mut rng, 5, 4);
        let y = Array2::from_shape_fn((5, 1), |(i, _)| (i % 2) as f64);
        let loss = |p: &ParameterStore, tape: &mut Tape| -> Result<NodeId> {
            let x = tape.constant(h.clone())?;
            let nodes = layer.record(tape, p, x)?;
            let logits = head.record(tape, p, nodes.output)?;
            tape.bce_with_logits(logits, y.clone())
        };
        let mut tape = Tape::new();
        let l = loss(&store, &mut tape).unwrap();
        let ids = store.ids();
        let ad = tape.backward(l, &ids).unwrap();
        let fd = finite_difference(
            |p| {
                let mut t = Tape::new();
                let l = loss(p, &mut t)?;
                Ok(t.scalar(l))
            },
            &store,
            &ids,
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(&ad, &fd) < 1e-4);
    }

    #[test]
    fn load_report_uniform_and_one_hot() {
        let uniform = GateProfile::from_gates(&Array2::from_elem((3, 4), 0.25));
        let r = expert_load_report(&[uniform]).unwrap();
        assert!(r.mean.iter().all(|&m| (m - 0.25).abs() < 1e-15));
        assert!((r.entropy - 4f64.ln()).abs() < 1e-12);
        assert!((r.load_entropy - 4f64.ln()).abs() < 1e-12);

        let mut hot = Array2::zeros((5, 4));
        hot.column_mut(0).fill(1.0);
        let r = expert_load_report(&[GateProfile::from_gates(&hot)]).unwrap();
        assert_eq!(r.mean, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.entropy, 0.0);
        assert!(matches!(expert_load_report(&[]), Err(Error::Contract(_))));
    }
}
