//! Sequence encoders mapping each patient's `T x F` visit matrix to a
//! hidden state of width `H`. All weights live in the backbone group.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamSource, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Gru,
    Attention,
}

/// GRU gates over `[x_t | h_{t-1}]`; each weight is `(F + H) x H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub w_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub b_cand: ParamId,
}

/// Single self-attention layer, mean-pooled over visits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    /// Scalar weight of a linear recency bias on the attention scores.
    pub pos_scale: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Backbone {
    Gru(GruParams),
    Attention(AttentionParams),
}

pub fn gru_param_count(input_dim: usize, hidden: usize) -> usize {
    3 * ((input_dim + hidden) * hidden + hidden)
}

pub fn attention_param_count(input_dim: usize, hidden: usize) -> usize {
    3 * input_dim * hidden + hidden * hidden + hidden + 1
}

/// Scalar parameter count of the named group (`theta_m`, `theta_s`,
/// `theta_e`).
pub fn count_params(store: &ParameterStore, group: &str) -> Result<usize> {
    let group: Group = group.parse()?;
    Ok(store.count(group))
}

impl Backbone {
    pub fn init<R: Rng>(
        kind: BackboneKind,
        input_dim: usize,
        hidden: usize,
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Self {
        let g = Group::Backbone;
        match kind {
            BackboneKind::Gru => {
                let rows = input_dim + hidden;
                Backbone::Gru(GruParams {
                    input_dim,
                    hidden,
                    w_update: store.add_uniform("gru.w_update", g, rows, hidden, rows, rng),
                    b_update: store.add_uniform("gru.b_update", g, 1, hidden, rows, rng),
                    w_reset: store.add_uniform("gru.w_reset", g, rows, hidden, rows, rng),
                    b_reset: store.add_uniform("gru.b_reset", g, 1, hidden, rows, rng),
                    w_cand: store.add_uniform("gru.w_cand", g, rows, hidden, rows, rng),
                    b_cand: store.add_uniform("gru.b_cand", g, 1, hidden, rows, rng),
                })
            }
            BackboneKind::Attention => Backbone::Attention(AttentionParams {
                input_dim,
                hidden,
                w_query: store.add_uniform("attn.w_query", g, input_dim, hidden, input_dim, rng),
                w_key: store.add_uniform("attn.w_key", g, input_dim, hidden, input_dim, rng),
                w_value: store.add_uniform("attn.w_value", g, input_dim, hidden, input_dim, rng),
                w_out: store.add_uniform("attn.w_out", g, hidden, hidden, hidden, rng),
                b_out: store.add_uniform("attn.b_out", g, 1, hidden, hidden, rng),
                pos_scale: store.add("attn.pos_scale", g, Array2::zeros((1, 1))),
            }),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Backbone::Gru(_) => BackboneKind::Gru,
            Backbone::Attention(_) => BackboneKind::Attention,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Backbone::Gru(p) => p.input_dim,
            Backbone::Attention(p) => p.input_dim,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Backbone::Gru(p) => p.hidden,
            Backbone::Attention(p) => p.hidden,
        }
    }

    /// Records the encoder on `tape`, returning the `N x H` hidden states.
    pub fn encode(&self, tape: &mut Tape, params: &dyn ParamSource, batch: &Batch) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if batch.features() != self.input_dim() {
            return Err(Error::shape(
                "backbone input",
                (batch.visits(), batch.features()),
                (batch.visits(), self.input_dim()),
            ));
        }
        match self {
            Backbone::Gru(p) => gru_forward(tape, params, p, batch),
            Backbone::Attention(p) => attention_forward(tape, params, p, batch),
        }
    }

    /// Hidden states of `batch` without keeping the tape.
    pub fn encode_values(&self, params: &dyn ParamSource, batch: &Batch) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let h = self.encode(&mut tape, params, batch)?;
        Ok(tape.value(h).clone())
    }
}

fn gru_forward(tape: &mut Tape, view: &dyn ParamSource, p: &GruParams, batch: &Batch) -> Result<NodeId> {
    let (f, hd) = (p.input_dim, p.hidden);
    let split = |tape: &mut Tape, id: ParamId| -> Result<(NodeId, NodeId)> {
        let w = tape.param(id, view.param(id))?;
        Ok((tape.slice_rows(w, 0, f)?, tape.slice_rows(w, f, f + hd)?))
    };
    let (wz_x, wz_h) = split(tape, p.w_update)?;
    let (wr_x, wr_h) = split(tape, p.w_reset)?;
    let (wc_x, wc_h) = split(tape, p.w_cand)?;
    let bz = tape.param(p.b_update, view.param(p.b_update))?;
    let br = tape.param(p.b_reset, view.param(p.b_reset))?;
    let bc = tape.param(p.b_cand, view.param(p.b_cand))?;

    let mut h = tape.constant(Array2::zeros((batch.len(), hd)))?;
    for step in &batch.steps {
        let x = tape.constant(step.clone())?;
        let gate = |tape: &mut Tape, wx: NodeId, hin: NodeId, wh: NodeId, b: NodeId| -> Result<NodeId> {
            let a = tape.matmul(x, wx)?;
            let c = tape.matmul(hin, wh)?;
            let s = tape.add(a, c)?;
            tape.add_row(s, b)
        };
        let z = gate(tape, wz_x, h, wz_h, bz)?;
        let z = tape.sigmoid(z)?;
        let r = gate(tape, wr_x, h, wr_h, br)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let n = gate(tape, wc_x, rh, wc_h, bc)?;
        let n = tape.tanh(n)?;
        // h' = h + z * (n - h)
        let d = tape.sub(n, h)?;
        let zd = tape.mul(z, d)?;
        h = tape.add(h, zd)?;
    }
    Ok(h)
}

struct AttentionNodes {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    pos: NodeId,
}

fn attention_nodes(tape: &mut Tape, view: &dyn ParamSource, p: &AttentionParams) -> Result<AttentionNodes> {
    Ok(AttentionNodes {
        wq: tape.param(p.w_query, view.param(p.w_query))?,
        wk: tape.param(p.w_key, view.param(p.w_key))?,
        wv: tape.param(p.w_value, view.param(p.w_value))?,
        pos: tape.param(p.pos_scale, view.param(p.pos_scale))?,
    })
}

/// Returns (attention weights `T x T`, values `T x H`) for one patient.
fn attend(tape: &mut Tape, nodes: &AttentionNodes, hidden: usize, x: Array2<f64>) -> Result<(NodeId, NodeId)> {
    let t = x.nrows();
    let xn = tape.constant(x)?;
    let q = tape.matmul(xn, nodes.wq)?;
    let k = tape.matmul(xn, nodes.wk)?;
    let v = tape.matmul(xn, nodes.wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (hidden as f64).sqrt())?;
    let positions = Array2::from_shape_fn((1, t), |(_, j)| j as f64 / t as f64);
    let positions = tape.constant(positions)?;
    let bias = tape.matmul(nodes.pos, positions)?;
    let scores = tape.add_row(scores, bias)?;
    let weights = tape.softmax_rows(scores)?;
    Ok((weights, v))
}

fn attention_forward(tape: &mut Tape, view: &dyn ParamSource, p: &AttentionParams, batch: &Batch) -> Result<NodeId> {
    let nodes = attention_nodes(tape, view, p)?;
    let t = batch.visits();
    let pool = tape.constant(Array2::from_elem((1, t), 1.0 / t as f64))?;
    let mut pooled = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let (weights, v) = attend(tape, &nodes, p.hidden, batch.patient(i))?;
        let o = tape.matmul(weights, v)?;
        pooled.push(tape.matmul(pool, o)?);
    }
    let stacked = tape.concat_rows(&pooled)?;
    let wo = tape.param(p.w_out, view.param(p.w_out))?;
    let bo = tape.param(p.b_out, view.param(p.b_out))?;
    let out = tape.matmul(stacked, wo)?;
    tape.add_row(out, bo)
}

/// Hidden state (`1 x H`) of a single `T x F` visit matrix under a GRU.
pub fn encode_gru(x: &Array2<f64>, store: &ParameterStore, params: &GruParams) -> Result<Array2<f64>> {
    Backbone::Gru(params.clone()).encode_values(store, &Batch::single(x)?)
}

/// Hidden state (`1 x H`) of a single `T x F` visit matrix under the
/// attention encoder.
pub fn encode_attention(
    x: &Array2<f64>,
    store: &ParameterStore,
    params: &AttentionParams,
) -> Result<Array2<f64>> {
    Backbone::Attention(params.clone()).encode_values(store, &Batch::single(x)?)
}

/// Attention weights (`T x T`) of one patient.
pub fn attention_weights(
    x: &Array2<f64>,
    store: &ParameterStore,
    params: &AttentionParams,
) -> Result<Array2<f64>> {
    if x.ncols() != params.input_dim {
        return Err(Error::shape("attention input", x.dim(), (x.nrows(), params.input_dim)));
    }
    Batch::single(x)?;
    let mut tape = Tape::new();
    let nodes = attention_nodes(&mut tape, store, params)?;
    let (w, _) = attend(&mut tape, &nodes, params.hidden, x.clone())?;
    Ok(tape.value(w).clone())
}
