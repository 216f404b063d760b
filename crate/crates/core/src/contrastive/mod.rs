//! In-batch InfoNCE and its extension with the anchor's own
//! intermediate-layer representations as extra negatives.
//!
//! Both losses are built from graph primitives so their gradients come
//! from the same reverse sweep as the encoder's.

use serde::{Deserialize, Serialize};

use crate::encoder::SentenceViews;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

pub use crate::numerics::cosine;

/// Default softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

/// Temperatures of the sensitivity sweep.
pub const TEMPERATURE_SWEEP: [f64; 4] = [0.001, 0.01, 0.05, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    None,
    SingleLayer,
    Progressive,
}

/// Which intermediate layers supply negatives, in descending layer order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NegativeStrategy {
    kind: NegativeKind,
    layers: Vec<usize>,
}

impl NegativeStrategy {
    pub fn none() -> Self {
        Self {
            kind: NegativeKind::None,
            layers: Vec::new(),
        }
    }

    pub fn single_layer(layer: usize) -> Self {
        Self {
            kind: NegativeKind::SingleLayer,
            layers: vec![layer],
        }
    }

    /// Stacks the `count` layers directly below the last: `L-1, ..., L-count`.
    pub fn progressive(count: usize, num_layers: usize) -> Result<Self> {
        if count > num_layers {
            return Err(Error::Config(format!(
                "cannot stack {count} layers below layer {num_layers}"
            )));
        }
        Ok(Self {
            kind: NegativeKind::Progressive,
            layers: (num_layers - count..num_layers).rev().collect(),
        })
    }

    pub fn kind(&self) -> NegativeKind {
        self.kind
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Checks every layer index against an `num_layers`-block encoder.
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if let Some(&bad) = self.layers.iter().find(|&&m| m >= num_layers) {
            return Err(Error::Config(format!(
                "negative layer {bad} must be below the last layer {num_layers}"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for NegativeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            NegativeKind::None => write!(f, "none"),
            NegativeKind::SingleLayer => write!(f, "single_layer:{}", self.layers[0]),
            NegativeKind::Progressive => write!(f, "progressive:{}", self.layers.len()),
        }
    }
}

/// What the in-batch denominator compares each anchor against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Positive views of every sentence in the batch (the SimCSE form).
    Positives,
    /// Anchor views of every sentence in the batch.
    Anchors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub strategy: NegativeStrategy,
    pub detach_negatives: bool,
    pub denominator: Denominator,
    /// Also contrast each anchor with the other sentences' intermediate vectors.
    pub cross_batch_intermediate: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            strategy: NegativeStrategy::none(),
            detach_negatives: false,
            denominator: Denominator::Positives,
            cross_batch_intermediate: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        check_temperature(self.temperature)?;
        self.strategy.validate(num_layers)
    }

    /// Loss of one step: InfoNCE when the strategy selects no layers,
    /// otherwise the intermediate-negative objective.
    pub fn compute(
        &self,
        g: &mut Graph,
        anchor: &SentenceViews,
        positive: &SentenceViews,
    ) -> Result<Var> {
        let negs = build_negatives(anchor, &self.strategy)?;
        let (h, hp) = (anchor.last(), positive.last());
        if negs.is_empty() {
            loss_tcm_with(g, h, hp, self.temperature, self.denominator)
        } else {
            loss_hne(g, h, hp, &negs, self.temperature, self)
        }
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Anchor-normalized rows, in-batch similarity logits and the positive logits.
struct Logits {
    anchors: Var,
    in_batch: Var,
    positive: Var,
}

fn in_batch_logits(
    g: &mut Graph,
    anchors: Var,
    positives: Var,
    tau: f64,
    denom: Denominator,
) -> Result<Logits> {
    if g.shape(anchors) != g.shape(positives) {
        return Err(Error::dim(
            "contrastive loss",
            g.shape(anchors),
            g.shape(positives),
        ));
    }
    if g.shape(anchors).first() == Some(&0) {
        return Err(Error::Input(
            "contrastive loss needs at least one pair".into(),
        ));
    }
    let a = g.normalize_rows(anchors)?;
    let p = g.normalize_rows(positives)?;
    match denom {
        Denominator::Positives => {
            let sim = g.matmul_nt(a, p)?;
            let in_batch = g.scale(sim, 1.0 / tau)?;
            let positive = g.diag(in_batch)?;
            Ok(Logits {
                anchors: a,
                in_batch,
                positive,
            })
        }
        Denominator::Anchors => {
            let sim = g.matmul_nt(a, a)?;
            let in_batch = g.scale(sim, 1.0 / tau)?;
            let n = g.shape(a)[0];
            let pos = g.row_dot(a, p)?;
            let pos = g.scale(pos, 1.0 / tau)?;
            let positive = g.reshape(pos, &[n])?;
            Ok(Logits {
                anchors: a,
                in_batch,
                positive,
            })
        }
    }
}

fn mean_nll(g: &mut Graph, logits: Var, positive: Var) -> Result<Var> {
    let lse = g.logsumexp_rows(logits)?;
    let nll = g.sub(lse, positive)?;
    g.mean(nll)
}

/// In-batch InfoNCE over `[N x d']` anchors and positives.
pub fn loss_tcm(g: &mut Graph, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    loss_tcm_with(g, anchors, positives, tau, Denominator::Positives)
}

pub fn loss_tcm_with(
    g: &mut Graph,
    anchors: Var,
    positives: Var,
    tau: f64,
    denom: Denominator,
) -> Result<Var> {
    check_temperature(tau)?;
    let l = in_batch_logits(g, anchors, positives, tau, denom)?;
    mean_nll(g, l.in_batch, l.positive)
}

/// InfoNCE whose denominator also holds each anchor's similarity to its own
/// representation at every negative layer (and, with
/// `cross_batch_intermediate`, to every other sentence's).
pub fn loss_hne(
    g: &mut Graph,
    anchors: Var,
    positives: Var,
    layer_negs: &[Var],
    tau: f64,
    cfg: &LossConfig,
) -> Result<Var> {
    check_temperature(tau)?;
    if layer_negs.is_empty() {
        return Err(Error::Config(
            "intermediate-negative loss needs at least one negative layer".into(),
        ));
    }
    let l = in_batch_logits(g, anchors, positives, tau, cfg.denominator)?;
    let mut columns = vec![l.in_batch];
    for &neg in layer_negs {
        if g.shape(neg) != g.shape(anchors) {
            return Err(Error::dim("negative layer", g.shape(neg), g.shape(anchors)));
        }
        let neg = if cfg.detach_negatives {
            g.detach(neg)
        } else {
            neg
        };
        let nn = g.normalize_rows(neg)?;
        let sim = if cfg.cross_batch_intermediate {
            g.matmul_nt(l.anchors, nn)?
        } else {
            g.row_dot(l.anchors, nn)?
        };
        columns.push(g.scale(sim, 1.0 / tau)?);
    }
    let logits = g.concat_cols(&columns)?;
    mean_nll(g, logits, l.positive)
}

/// Anchor-view sentence vectors of each strategy layer, in descending order.
pub fn build_negatives(
    anchor_views: &SentenceViews,
    strategy: &NegativeStrategy,
) -> Result<Vec<Var>> {
    let num_layers = anchor_views.per_layer.len().saturating_sub(1);
    strategy.validate(num_layers)?;
    Ok(strategy
        .layers()
        .iter()
        .map(|&m| anchor_views.per_layer[m])
        .collect())
}
