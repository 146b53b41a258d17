//! Model configuration, the five ablation wirings and the assembled
//! forward passes used for training and for streaming inference.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::backbone::{Backbone, BackboneKind};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::moe::{moe_forward, predict_logit, GateProfile, Head, MoeLayer};
use crate::params::{Group, ParamSource, ParameterStore};
use crate::rng::{stream, substream};
use crate::tta::{AdaptationState, TtaLayer};

/// Hidden sizes accepted by the experiment front end.
pub const HIDDEN_GRID: [usize; 2] = [64, 128];
/// Expert counts accepted by the experiment front end.
pub const EXPERT_GRID: [usize; 6] = [1, 2, 4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    BeforeMoe,
    AfterMoe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub hidden: usize,
    pub experts: usize,
    pub tta: bool,
    pub placement: Placement,
    pub moe: bool,
    /// Defaults to `hidden / 2`.
    pub bottleneck: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Gru,
            hidden: 64,
            experts: 16,
            tta: true,
            placement: Placement::BeforeMoe,
            moe: true,
            bottleneck: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn bottleneck(&self) -> usize {
        self.bottleneck.unwrap_or(self.hidden / 2)
    }

    /// Structural checks needed to build a model.
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 2 {
            return Err(Error::Config(format!("hidden size must be at least 2, got {}", self.hidden)));
        }
        if self.moe && self.experts == 0 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        if self.tta {
            let b = self.bottleneck();
            if b == 0 || b >= self.hidden {
                return Err(Error::Config(format!(
                    "tta bottleneck must satisfy 0 < B < H, got B={b}, H={}",
                    self.hidden
                )));
            }
        }
        wire_ablation(self).map(|_| ())
    }

    /// Additionally restricts `hidden` and `experts` to the experiment grids.
    pub fn validate_grid(&self) -> Result<()> {
        self.validate()?;
        if !HIDDEN_GRID.contains(&self.hidden) {
            return Err(Error::Config(format!("hidden must be one of {HIDDEN_GRID:?}, got {}", self.hidden)));
        }
        if self.moe && !EXPERT_GRID.contains(&self.experts) {
            return Err(Error::Config(format!("experts must be one of {EXPERT_GRID:?}, got {}", self.experts)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    BackboneOnly,
    TtaOnly,
    MoeOnly,
    TtaBeforeMoe,
    TtaAfterMoe,
}

impl Wiring {
    pub const ALL: [Wiring; 5] = [
        Wiring::BackboneOnly,
        Wiring::TtaOnly,
        Wiring::MoeOnly,
        Wiring::TtaBeforeMoe,
        Wiring::TtaAfterMoe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Wiring::BackboneOnly => "backbone_only",
            Wiring::TtaOnly => "tta_only",
            Wiring::MoeOnly => "moe_only",
            Wiring::TtaBeforeMoe => "tta_before_moe",
            Wiring::TtaAfterMoe => "tta_after_moe",
        }
    }

    pub fn has_tta(self) -> bool {
        matches!(self, Wiring::TtaOnly | Wiring::TtaBeforeMoe | Wiring::TtaAfterMoe)
    }

    pub fn has_moe(self) -> bool {
        matches!(self, Wiring::MoeOnly | Wiring::TtaBeforeMoe | Wiring::TtaAfterMoe)
    }

    /// `base` with the component switches of this wiring.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.tta = self.has_tta();
        cfg.moe = self.has_moe();
        cfg.placement = if self == Wiring::TtaAfterMoe {
            Placement::AfterMoe
        } else {
            Placement::BeforeMoe
        };
        cfg
    }
}

/// Resolves the component switches of `cfg` to one of the five wirings.
pub fn wire_ablation(cfg: &ModelConfig) -> Result<Wiring> {
    Ok(match (cfg.tta, cfg.moe, cfg.placement) {
        (false, false, _) => Wiring::BackboneOnly,
        (false, true, _) => Wiring::MoeOnly,
        (true, false, Placement::BeforeMoe) => Wiring::TtaOnly,
        (true, false, Placement::AfterMoe) => {
            return Err(Error::Config("tta placement after_moe requires the moe to be enabled".into()))
        }
        (true, true, Placement::BeforeMoe) => Wiring::TtaBeforeMoe,
        (true, true, Placement::AfterMoe) => Wiring::TtaAfterMoe,
    })
}

#[derive(Debug, Default)]
struct CallCounter(AtomicU64);

impl Clone for CallCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.0.load(Ordering::Relaxed)))
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub wiring: Wiring,
    pub input_dim: usize,
    pub backbone: Backbone,
    pub tta: Option<TtaLayer>,
    pub moe: Option<MoeLayer>,
    pub head: Head,
    pub store: ParameterStore,
    tta_calls: CallCounter,
}

/// Tape handles of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub hidden: NodeId,
    pub logits: NodeId,
    pub recon_loss: Option<NodeId>,
    pub gates: Option<NodeId>,
}

/// Result of one streamed batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Array1<f64>,
    /// `l_s` after adaptation (second pass).
    pub recon_loss: Option<f64>,
    /// `l_s` on arrival, before the batch was adapted to.
    pub recon_loss_pre: Option<f64>,
    pub gates: Option<GateProfile>,
}

impl Model {
    /// Builds a freshly initialised model for `input_dim` features. All
    /// weights come from the `init` substream of `config.seed`.
    pub fn new(config: ModelConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let wiring = wire_ablation(&config)?;
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let mut rng = substream(config.seed, stream::INIT);
        let mut store = ParameterStore::new();
        let h = config.hidden;
        let backbone = Backbone::init(config.backbone, input_dim, h, &mut store, &mut rng);
        let tta = if wiring.has_tta() {
            Some(TtaLayer::init(h, config.bottleneck(), &mut store, &mut rng)?)
        } else {
            None
        };
        let moe = if wiring.has_moe() {
            Some(MoeLayer::init(h, config.experts, &mut store, &mut rng)?)
        } else {
            None
        };
        let head = Head::init(h, &mut store, &mut rng);
        Ok(Self {
            config,
            wiring,
            input_dim,
            backbone,
            tta,
            moe,
            head,
            store,
            tta_calls: CallCounter::default(),
        })
    }

    /// Number of times the test-time layer has been evaluated.
    pub fn tta_calls(&self) -> u64 {
        self.tta_calls.0.load(Ordering::Relaxed)
    }

    fn count_tta_call(&self) {
        self.tta_calls.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn param_counts(&self) -> [(Group, usize); 3] {
        Group::ALL.map(|g| (g, self.store.count(g)))
    }

    /// Records the full forward pass with every parameter read from `src`.
    pub fn record(&self, tape: &mut Tape, src: &dyn ParamSource, batch: &Batch) -> Result<ForwardNodes> {
        let hidden = self.backbone.encode(tape, src, batch)?;
        let mut recon_loss = None;
        let mut gates = None;
        let mut x = hidden;
        match self.wiring {
            Wiring::BackboneOnly => {}
            Wiring::TtaOnly | Wiring::TtaBeforeMoe => {
                let nodes = self.tta_layer()?.record(tape, src, x)?;
                self.count_tta_call();
                recon_loss = Some(nodes.recon_loss);
                x = nodes.adapted;
            }
            Wiring::MoeOnly | Wiring::TtaAfterMoe => {}
        }
        if let Some(moe) = &self.moe {
            let nodes = moe.record(tape, src, x)?;
            gates = Some(nodes.gates);
            x = nodes.output;
        }
        if self.wiring == Wiring::TtaAfterMoe {
            let nodes = self.tta_layer()?.record(tape, src, x)?;
            self.count_tta_call();
            recon_loss = Some(nodes.recon_loss);
            x = nodes.adapted;
        }
        let logits = self.head.record(tape, src, x)?;
        Ok(ForwardNodes {
            hidden,
            logits,
            recon_loss,
            gates,
        })
    }

    fn tta_layer(&self) -> Result<&TtaLayer> {
        self.tta
            .as_ref()
            .ok_or_else(|| Error::Contract("wiring requires a tta layer".into()))
    }

    /// Fresh online state seeded from the stored `theta_s`, or `None` when
    /// the wiring has no test-time layer.
    pub fn adaptation_state(&self, lr: Option<f64>) -> Result<Option<AdaptationState>> {
        match &self.tta {
            Some(layer) => Ok(Some(AdaptationState::new(layer.clone(), &self.store, lr)?)),
            None => Ok(None),
        }
    }

    /// Streams one batch through the two-pass flow. Only `state` changes;
    /// the backbone, experts and head are read from `self.store`.
    pub fn stream_step(
        &self,
        batch: &Batch,
        state: Option<&mut AdaptationState>,
        steps: usize,
    ) -> Result<StepOutput> {
        let h = self.backbone.encode_values(&self.store, batch)?;
        let mut state = state;
        let mut adapt = |x: &Array2<f64>| -> Result<(Array2<f64>, f64, f64)> {
            let st = state
                .as_deref_mut()
                .ok_or_else(|| Error::Contract("wiring with tta needs an adaptation state".into()))?;
            self.count_tta_call();
            let (out, loss) = st.two_pass_apply(x, steps)?;
            Ok((out, loss, st.last_pre_loss.unwrap_or(loss)))
        };
        let mut recon = None;
        let mut x = h;
        if matches!(self.wiring, Wiring::TtaOnly | Wiring::TtaBeforeMoe) {
            let (out, post, pre) = adapt(&x)?;
            recon = Some((post, pre));
            x = out;
        }
        let mut gates = None;
        if let Some(moe) = &self.moe {
            let (z, g) = moe_forward(&x, moe, &self.store)?;
            gates = Some(g);
            x = z;
        }
        if self.wiring == Wiring::TtaAfterMoe {
            let (out, post, pre) = adapt(&x)?;
            recon = Some((post, pre));
            x = out;
        }
        let logits = predict_logit(&x, &self.head, &self.store)?;
        Ok(StepOutput {
            logits,
            recon_loss: recon.map(|r| r.0),
            recon_loss_pre: recon.map(|r| r.1),
            gates,
        })
    }

    /// Logits of `batch` with the stored weights and no adaptation.
    pub fn predict(&self, batch: &Batch) -> Result<Array1<f64>> {
        let mut state = self.adaptation_state(None)?;
        Ok(self.stream_step(batch, state.as_mut(), 1)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(wiring: Wiring) -> ModelConfig {
        wiring.apply(&ModelConfig {
            hidden: 8,
            experts: 2,
            ..ModelConfig::default()
        })
    }

    fn batch(n: usize, t: usize, f: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Array2<f64>> = (0..n)
            .map(|_| Array2::from_shape_fn((t, f), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let refs: Vec<&Array2<f64>> = xs.iter().collect();
        let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        Batch::from_matrices(&refs, Some(&y), (0..n).collect()).unwrap()
    }

    #[test]
    fn wirings_resolve_and_round_trip() {
        for w in Wiring::ALL {
            assert_eq!(wire_ablation(&w.apply(&ModelConfig::default())).unwrap(), w);
        }
        let bad = ModelConfig {
            moe: false,
            placement: Placement::AfterMoe,
            ..ModelConfig::default()
        };
        assert!(matches!(wire_ablation(&bad), Err(Error::Config(_))));
        assert!(matches!(Model::new(bad, 3), Err(Error::Config(_))));
    }

    #[test]
    fn backbone_only_experts_group_is_head() {
        let m = Model::new(small(Wiring::BackboneOnly), 3).unwrap();
        assert_eq!(m.store.count(Group::Experts), 8 + 1);
        assert_eq!(m.store.count(Group::Tta), 0);
    }

    #[test]
    fn moe_only_never_invokes_tta() {
        let m = Model::new(small(Wiring::MoeOnly), 3).unwrap();
        let b = batch(4, 3, 3, 0);
        let mut tape = Tape::new();
        m.record(&mut tape, &m.store, &b).unwrap();
        m.predict(&b).unwrap();
        assert_eq!(m.tta_calls(), 0);

        let full = Model::new(small(Wiring::TtaBeforeMoe), 3).unwrap();
        full.predict(&b).unwrap();
        assert_eq!(full.tta_calls(), 1);
    }

    #[test]
    fn grid_validation_is_separate() {
        let cfg = small(Wiring::TtaBeforeMoe);
        assert!(cfg.validate().is_ok());
        assert!(matches!(cfg.validate_grid(), Err(Error::Config(_))));
        let cfg = ModelConfig {
            experts: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate_grid(), Err(Error::Config(_))));
        assert!(ModelConfig::default().validate_grid().is_ok());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"hidden": 64, "hiden": 3}"#);
        assert!(err.is_err());
        let cfg: ModelConfig = serde_json::from_str(r#"{"backbone": "attention", "placement": "after_moe"}"#).unwrap();
        assert_eq!(cfg.backbone, BackboneKind::Attention);
        assert_eq!(cfg.placement, Placement::AfterMoe);
    }

    #[test]
    fn frozen_stream_matches_recorded_forward() {
        for w in Wiring::ALL {
            let m = Model::new(small(w), 3).unwrap();
            let b = batch(5, 4, 3, 1);
            let mut tape = Tape::new();
            let nodes = m.record(&mut tape, &m.store, &b).unwrap();
            let p = m.predict(&b).unwrap();
            for (a, c) in p.iter().zip(tape.value(nodes.logits).iter()) {
                assert!((a - c).abs() < 1e-12, "{w:?}");
            }
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for w in [Wiring::TtaBeforeMoe, Wiring::TtaAfterMoe] {
            let m = Model::new(small(w), 3).unwrap();
            let b = batch(4, 5, 3, 2);
            let y = b.labels.clone().unwrap();
            let loss = |p: &ParameterStore, tape: &mut Tape| -> Result<NodeId> {
                let nodes = m.record(tape, p, &b)?;
                let lm = tape.bce_with_logits(nodes.logits, y.clone())?;
                tape.add(lm, nodes.recon_loss.unwrap())
            };
            let mut tape = Tape::new();
            let l = loss(&m.store, &mut tape).unwrap();
            let ids = m.store.ids();
            let ad = tape.backward(l, &ids).unwrap();
            let frozen = tape.detached_values();
            let fd = finite_difference(
                |p| {
                    let mut t = Tape::replaying(frozen.clone());
                    let l = loss(p, &mut t)?;
                    Ok(t.scalar(l))
                },
                &m.store,
                &ids,
                1e-6,
            )
            .unwrap();
            assert!(max_relative_error(&ad, &fd) < 1e-4, "{w:?}");
        }
    }
}
