//! Self-supervised reconstruction layer and its online test-time update.
//!
//! The layer is a bottleneck MLP `h -> tanh(h W1 + b1) W2 + b2 = ĥ`
//! trained to reconstruct its own (detached) input with a mean-squared
//! error `l_s`. Downstream layers see `LayerNorm(h + ĥ)`, with `ĥ`
//! detached so the supervised loss never reaches the layer's weights.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{Group, GroupSnapshot, ParamId, ParamSource, ParameterStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaLayer {
    pub hidden: usize,
    pub bottleneck: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Tape handles produced by [`TtaLayer::record`].
#[derive(Debug, Clone, Copy)]
pub struct TtaNodes {
    pub reconstruction: NodeId,
    pub recon_loss: NodeId,
    pub adapted: NodeId,
}

pub fn tta_param_count(hidden: usize, bottleneck: usize) -> usize {
    hidden * bottleneck + bottleneck + bottleneck * hidden + hidden
}

impl TtaLayer {
    pub fn init<R: Rng>(
        hidden: usize,
        bottleneck: usize,
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= hidden {
            return Err(Error::Config(format!(
                "tta bottleneck must satisfy 0 < B < H, got B={bottleneck}, H={hidden}"
            )));
        }
        let g = Group::Tta;
        Ok(Self {
            hidden,
            bottleneck,
            w1: store.add_uniform("tta.w1", g, hidden, bottleneck, hidden, rng),
            b1: store.add_uniform("tta.b1", g, 1, bottleneck, hidden, rng),
            w2: store.add_uniform("tta.w2", g, bottleneck, hidden, bottleneck, rng),
            b2: store.add_uniform("tta.b2", g, 1, hidden, bottleneck, rng),
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Reconstruction of `target` (which must not require gradients) and
    /// its loss.
    fn reconstruct(&self, tape: &mut Tape, src: &dyn ParamSource, target: NodeId) -> Result<(NodeId, NodeId)> {
        let w1 = tape.param(self.w1, src.param(self.w1))?;
        let b1 = tape.param(self.b1, src.param(self.b1))?;
        let w2 = tape.param(self.w2, src.param(self.w2))?;
        let b2 = tape.param(self.b2, src.param(self.b2))?;
        let a = tape.matmul(target, w1)?;
        let a = tape.add_row(a, b1)?;
        let a = tape.tanh(a)?;
        let r = tape.matmul(a, w2)?;
        let r = tape.add_row(r, b2)?;
        let loss = tape.mse(r, target)?;
        Ok((r, loss))
    }

    /// Records the layer on `input` (`N x H`).
    pub fn record(&self, tape: &mut Tape, src: &dyn ParamSource, input: NodeId) -> Result<TtaNodes> {
        let (n, h) = tape.value(input).dim();
        if h != self.hidden {
            return Err(Error::shape("tta input", (n, h), (n, self.hidden)));
        }
        let target = tape.detach(input)?;
        let (reconstruction, recon_loss) = self.reconstruct(tape, src, target)?;
        let fixed = tape.detach(reconstruction)?;
        let sum = tape.add(input, fixed)?;
        let adapted = tape.layer_norm_rows(sum)?;
        Ok(TtaNodes {
            reconstruction,
            recon_loss,
            adapted,
        })
    }
}

/// Applies the layer to plain values, returning `(h_adapted, l_s)`.
pub fn tta_forward(h: &Array2<f64>, layer: &TtaLayer, src: &dyn ParamSource) -> Result<(Array2<f64>, f64)> {
    let mut tape = Tape::new();
    let input = tape.constant(h.clone())?;
    let nodes = layer.record(&mut tape, src, input)?;
    Ok((tape.value(nodes.adapted).clone(), tape.scalar(nodes.recon_loss)))
}

/// Online state of the test-time layer. Owned by exactly one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationState {
    pub layer: TtaLayer,
    pub params: GroupSnapshot,
    pub step_count: u64,
    pub lr: Option<f64>,
    pub last_loss: Option<f64>,
    /// Loss on the most recent batch before it was adapted to.
    pub last_pre_loss: Option<f64>,
}

impl AdaptationState {
    /// Starts a stream from the layer weights in `store`. `lr = None`
    /// disables updates.
    pub fn new(layer: TtaLayer, store: &ParameterStore, lr: Option<f64>) -> Result<Self> {
        if let Some(lr) = lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "tta learning rate must be positive (use none to disable), got {lr}"
                )));
            }
        }
        let ids = layer.ids();
        for id in ids {
            if id.0 >= store.len() || store.entry(id).group != Group::Tta {
                return Err(Error::Contract(format!("{id:?} is not a tta parameter")));
            }
        }
        let params = GroupSnapshot {
            ids: ids.to_vec(),
            values: ids.iter().map(|&id| store.get(id).clone()).collect(),
        };
        Ok(Self {
            layer,
            params,
            step_count: 0,
            lr,
            last_loss: None,
            last_pre_loss: None,
        })
    }

    /// Plain gradient-descent steps on `l_s(h)` with respect to the layer
    /// only. Returns the post-update loss on the same batch.
    pub fn update(&mut self, h: &Array2<f64>, steps: usize) -> Result<f64> {
        self.descend(h, steps)?;
        let (_, post) = tta_forward(h, &self.layer, &self.params)?;
        self.last_loss = Some(post);
        Ok(post)
    }

    /// Runs the descent steps and returns the loss seen by the first one.
    fn descend(&mut self, h: &Array2<f64>, steps: usize) -> Result<f64> {
        let lr = self
            .lr
            .ok_or_else(|| Error::Config("tta update requested without a learning rate".into()))?;
        if steps == 0 {
            return Err(Error::Config("tta steps must be at least 1".into()));
        }
        let ids = self.layer.ids();
        let mut first = None;
        for _ in 0..steps {
            let mut tape = Tape::new();
            let target = tape.constant(h.clone())?;
            let (_, loss) = self.layer.reconstruct(&mut tape, &self.params, target)?;
            first.get_or_insert(tape.scalar(loss));
            let grads = tape.backward(loss, &ids)?;
            for (id, g) in grads.iter() {
                let w = self.params.get_mut(id).expect("layer id in snapshot");
                w.scaled_add(-lr, g);
            }
            self.step_count += 1;
        }
        Ok(first.expect("at least one step"))
    }

    /// Reconstruction loss under the current weights, without updating.
    pub fn loss(&self, h: &Array2<f64>) -> Result<f64> {
        Ok(tta_forward(h, &self.layer, &self.params)?.1)
    }

    /// First pass computes `l_s` and, when a learning rate is set, updates
    /// the weights on it; the second pass recomputes the adapted
    /// representation with the updated weights. Returns `(h_adapted, l_s)`
    /// of the second pass; the first-pass loss is kept in `last_pre_loss`.
    pub fn two_pass_apply(&mut self, h: &Array2<f64>, steps: usize) -> Result<(Array2<f64>, f64)> {
        let pre = if self.lr.is_some() {
            Some(self.descend(h, steps)?)
        } else {
            None
        };
        let (adapted, loss) = tta_forward(h, &self.layer, &self.params)?;
        self.last_pre_loss = Some(pre.unwrap_or(loss));
        self.last_loss = Some(loss);
        Ok((adapted, loss))
    }
}
