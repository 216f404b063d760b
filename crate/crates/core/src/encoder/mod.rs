//! Post-layer-norm transformer encoder that exposes every layer's hidden
//! states, pools them into sentence vectors and optionally projects them.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Graph, Parameter, Tensor, Var, LAYER_NORM_EPS, MIN_NORM};

/// Reduction of token states to one sentence vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Token position 0.
    Cls,
    /// Mean over non-padding positions, CLS included.
    Avg,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Pooling::Cls),
            "avg" => Ok(Pooling::Avg),
            _ => Err(Error::Config(format!(
                "unknown pooling '{s}' (expected cls or avg)"
            ))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Cls => "cls",
            Pooling::Avg => "avg",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub pooling: Pooling,
    pub projection_dim: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 0,
            dropout: 0.1,
            max_seq_len: crate::data::DEFAULT_MAX_SEQ_LEN,
            pooling: Pooling::Avg,
            projection_dim: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.hidden_dim == 0
            || self.num_heads == 0
            || !self.hidden_dim.is_multiple_of(self.num_heads)
        {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive".into());
        }
        if self.vocab_size < 3 {
            return fail(format!(
                "vocab_size {} cannot hold the reserved tokens",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_seq_len < 2 {
            return fail(format!("max_seq_len {} below 2", self.max_seq_len));
        }
        if let Some(k) = self.projection_dim {
            if k == 0 || k > self.hidden_dim {
                return fail(format!(
                    "projection_dim {k} must be in 1..={}",
                    self.hidden_dim
                ));
            }
        }
        Ok(())
    }

    /// Width of the sentence vectors.
    pub fn output_dim(&self) -> usize {
        self.projection_dim.unwrap_or(self.hidden_dim)
    }
}

/// Indices of one block's parameters.
#[derive(Clone, Debug)]
struct BlockSlots {
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
    ln1: (usize, usize),
    ffn_in: (usize, usize),
    ffn_out: (usize, usize),
    ln2: (usize, usize),
}

#[derive(Clone, Debug)]
struct Layout {
    token_emb: usize,
    position_emb: usize,
    emb_ln: (usize, usize),
    blocks: Vec<BlockSlots>,
    projection: Option<usize>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Parameter names, shapes and initializers in storage order.
fn parameter_specs(cfg: &EncoderConfig) -> (Vec<(String, Vec<usize>, Init)>, Layout) {
    let (d, f) = (cfg.hidden_dim, cfg.ffn_dim);
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        specs.push((name, shape, init));
        specs.len() - 1
    };
    let linear = |push: &mut dyn FnMut(String, Vec<usize>, Init) -> usize,
                  name: &str,
                  i: usize,
                  o: usize| {
        (
            push(format!("{name}.weight"), vec![i, o], Init::Normal),
            push(format!("{name}.bias"), vec![o], Init::Zeros),
        )
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, name: &str| {
        (
            push(format!("{name}.gain"), vec![d], Init::Ones),
            push(format!("{name}.bias"), vec![d], Init::Zeros),
        )
    };
    let token_emb = push(
        "embeddings.token".into(),
        vec![cfg.vocab_size, d],
        Init::Normal,
    );
    let position_emb = push(
        "embeddings.position".into(),
        vec![cfg.max_seq_len, d],
        Init::Normal,
    );
    let emb_ln = norm(&mut push, "embeddings.norm");
    let blocks = (0..cfg.num_layers)
        .map(|l| {
            let p = format!("block{l}");
            BlockSlots {
                q: linear(&mut push, &format!("{p}.attn.query"), d, d),
                k: linear(&mut push, &format!("{p}.attn.key"), d, d),
                v: linear(&mut push, &format!("{p}.attn.value"), d, d),
                o: linear(&mut push, &format!("{p}.attn.output"), d, d),
                ln1: norm(&mut push, &format!("{p}.attn_norm")),
                ffn_in: linear(&mut push, &format!("{p}.ffn.in"), d, f),
                ffn_out: linear(&mut push, &format!("{p}.ffn.out"), f, d),
                ln2: norm(&mut push, &format!("{p}.ffn_norm")),
            }
        })
        .collect();
    let projection = cfg
        .projection_dim
        .map(|k| push("projection.weight".into(), vec![d, k], Init::Normal));
    (
        specs,
        Layout {
            token_emb,
            position_emb,
            emb_ln,
            blocks,
            projection,
        },
    )
}

/// Standard deviation of the normal initializer for weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    params: Vec<Parameter>,
    layout: Layout,
}

/// Per-layer token states of one batch, bound to a graph.
#[derive(Clone, Debug)]
pub struct LayerStates {
    /// `L + 1` padded `[N x m x d]` tensors; index 0 is the embedding output.
    pub states: Vec<Var>,
    /// The same states as packed `[tokens x d]` rows.
    pub packed: Vec<Var>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewTag {
    Anchor,
    Positive,
}

/// Pooled (and optionally projected) per-layer sentence vectors.
#[derive(Clone, Debug)]
pub struct SentenceViews {
    /// `L + 1` tensors of shape `[N x d']`.
    pub per_layer: Vec<Var>,
    pub tag: ViewTag,
}

impl SentenceViews {
    pub fn last(&self) -> Var {
        *self
            .per_layer
            .last()
            .expect("views hold at least two layers")
    }
}

/// Token states and sentence vectors of a frozen forward pass.
#[derive(Clone, Debug)]
pub struct FrozenOutputs {
    /// Per layer, one `[len_i x d]` tensor of unpadded token states per sentence.
    pub token_states: Vec<Vec<Tensor>>,
    /// Per layer, `[N x d']` sentence vectors.
    pub sentence_vectors: Vec<Tensor>,
}

fn keep_mask<R: Rng>(rng: &mut R, n: usize, p: f64) -> Vec<f64> {
    // Each 64-bit draw yields two 32-bit uniforms; a unit is dropped when its
    // uniform falls below `p` quantised to 2^-32.
    let scale = 1.0 / (1.0 - p);
    let threshold = (p * 4_294_967_296.0).round().min(u32::MAX as f64) as u32;
    let mut mask = Vec::with_capacity(n + 1);
    while mask.len() < n {
        let bits = rng.next_u64();
        for u in [bits as u32, (bits >> 32) as u32] {
            mask.push(if u < threshold { 0.0 } else { scale });
        }
    }
    mask.truncate(n);
    mask
}

fn check_norms(g: &Graph, v: Var) -> Result<()> {
    let t = g.value(v);
    for r in 0..t.outer_rows() {
        let n = crate::numerics::kernels::norm(t.row(r));
        if n.is_nan() || n <= MIN_NORM {
            return Err(Error::DegenerateProjection(format!(
                "projected row {r} has norm {n}"
            )));
        }
    }
    Ok(())
}

impl Encoder {
    /// Fresh weights: normal(0, 0.02) matrices, zero biases, unit norm gains.
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = parameter_specs(&config);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| normal.sample(rng)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Parameter::new(name, Tensor::from_parts(shape, data))
            })
            .collect();
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn from_seed(config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Rebuilds an encoder from stored weights; names and shapes must match the config.
    pub fn from_parameters(config: EncoderConfig, params: Vec<Parameter>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = parameter_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams::bind(g, &self.params, trainable)
    }

    fn validate_batch(&self, batch: &Batch) -> Result<()> {
        let v = self.config.vocab_size;
        if batch.size() == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        for (row, &len) in batch.token_ids.iter().zip(&batch.lengths) {
            if len == 0 || len > self.config.max_seq_len {
                return Err(Error::Input(format!(
                    "sequence length {len} outside 1..={}",
                    self.config.max_seq_len
                )));
            }
            if let Some(&bad) = row[..len].iter().find(|&&id| id >= v) {
                return Err(Error::Input(format!(
                    "token id {bad} not below vocabulary size {v}"
                )));
            }
        }
        Ok(())
    }

    /// Runs the encoder, returning all `L + 1` layer states.
    ///
    /// Dropout on attention probabilities and FFN activations is active iff
    /// `dropout_seed` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        w: &BoundParams,
        batch: &Batch,
        dropout_seed: Option<u64>,
    ) -> Result<LayerStates> {
        self.validate_batch(batch)?;
        let cfg = &self.config;
        let lengths = batch.lengths.clone();
        let max_len = batch.max_len();
        let p = cfg.dropout;
        let mut rng = dropout_seed
            .filter(|_| p > 0.0)
            .map(ChaCha8Rng::seed_from_u64);
        let lay = &self.layout;

        let tok = g.gather_rows(w.var(lay.token_emb), &batch.packed_ids())?;
        let pos = g.gather_rows(w.var(lay.position_emb), &batch.packed_positions())?;
        let emb = g.add(tok, pos)?;
        let mut x = g.layer_norm(
            emb,
            w.var(lay.emb_ln.0),
            w.var(lay.emb_ln.1),
            LAYER_NORM_EPS,
        )?;

        let mut packed = vec![x];
        let prob_len: usize = lengths.iter().map(|l| l * l).sum::<usize>() * cfg.num_heads;
        let tokens: usize = lengths.iter().sum();
        for b in &lay.blocks {
            let lin = |g: &mut Graph, x: Var, s: (usize, usize)| {
                g.linear(x, w.var(s.0), Some(w.var(s.1)))
            };
            let q = lin(g, x, b.q)?;
            let k = lin(g, x, b.k)?;
            let v = lin(g, x, b.v)?;
            let keep = rng.as_mut().map(|r| keep_mask(r, prob_len, p));
            let ctx = g.attention(q, k, v, &lengths, cfg.num_heads, keep)?;
            let attn_out = lin(g, ctx, b.o)?;
            let res1 = g.add(x, attn_out)?;
            let h1 = g.layer_norm(res1, w.var(b.ln1.0), w.var(b.ln1.1), LAYER_NORM_EPS)?;

            let pre = lin(g, h1, b.ffn_in)?;
            let mut act = g.gelu(pre)?;
            if let Some(r) = rng.as_mut() {
                let mask = g.constant(Tensor::from_parts(
                    vec![tokens, cfg.ffn_dim],
                    keep_mask(r, tokens * cfg.ffn_dim, p),
                ));
                act = g.mul(act, mask)?;
            }
            let ffn_out = lin(g, act, b.ffn_out)?;
            let res2 = g.add(h1, ffn_out)?;
            x = g.layer_norm(res2, w.var(b.ln2.0), w.var(b.ln2.1), LAYER_NORM_EPS)?;
            packed.push(x);
        }
        let states = packed
            .iter()
            .map(|&s| g.pad_packed(s, &lengths, max_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerStates {
            states,
            packed,
            lengths,
            max_len,
        })
    }

    /// Binds the projection head if configured, then pools and projects.
    pub fn sentence_views(
        &self,
        g: &mut Graph,
        w: &BoundParams,
        states: &LayerStates,
        tag: ViewTag,
    ) -> Result<SentenceViews> {
        let views = pool(g, states, self.config.pooling, tag)?;
        match self.layout.projection {
            Some(slot) => project(g, &views, w.var(slot)),
            None => Ok(views),
        }
    }

    /// Anchor and positive views from two passes with independent dropout seeds.
    pub fn two_view_forward(
        &self,
        g: &mut Graph,
        w: &BoundParams,
        batch: &Batch,
        seeds: (u64, u64),
    ) -> Result<(SentenceViews, SentenceViews)> {
        if seeds.0 == seeds.1 {
            return Err(Error::IdenticalSeeds(seeds.0));
        }
        let a = self.forward(g, w, batch, Some(seeds.0))?;
        let anchor = self.sentence_views(g, w, &a, ViewTag::Anchor)?;
        let p = self.forward(g, w, batch, Some(seeds.1))?;
        let positive = self.sentence_views(g, w, &p, ViewTag::Positive)?;
        Ok((anchor, positive))
    }

    /// Dropout-free pass over `batch` without gradient tracking.
    pub fn frozen(&self, batch: &Batch) -> Result<FrozenOutputs> {
        self.frozen_with_pooling(batch, self.config.pooling)
    }

    pub fn frozen_with_pooling(&self, batch: &Batch, pooling: Pooling) -> Result<FrozenOutputs> {
        let mut g = Graph::new();
        let w = self.bind(&mut g, false);
        let st = self.forward(&mut g, &w, batch, None)?;
        let mut views = pool(&mut g, &st, pooling, ViewTag::Anchor)?;
        if let Some(slot) = self.layout.projection {
            views = project(&mut g, &views, w.var(slot))?;
        }
        let d = self.config.hidden_dim;
        let token_states = st
            .packed
            .iter()
            .map(|&v| {
                let data = g.value(v).data();
                let mut off = 0;
                st.lengths
                    .iter()
                    .map(|&len| {
                        let t = Tensor::from_parts(
                            vec![len, d],
                            data[off * d..(off + len) * d].to_vec(),
                        );
                        off += len;
                        t
                    })
                    .collect()
            })
            .collect();
        let sentence_vectors = views
            .per_layer
            .iter()
            .map(|&v| g.value(v).clone())
            .collect();
        Ok(FrozenOutputs {
            token_states,
            sentence_vectors,
        })
    }

    /// Frozen sentence vectors of `sentences` at `layer`, processed in chunks.
    pub fn embed_sentences<S: AsRef<str>>(
        &self,
        sentences: &[S],
        vocab: &crate::data::Vocabulary,
        layer: usize,
    ) -> Result<Vec<Vec<f64>>> {
        if layer > self.config.num_layers {
            return Err(Error::Config(format!(
                "layer {layer} exceeds {}",
                self.config.num_layers
            )));
        }
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(EMBED_CHUNK) {
            let batch = crate::data::encode_batch(chunk, vocab, self.config.max_seq_len)?;
            let f = self.frozen(&batch)?;
            let t = &f.sentence_vectors[layer];
            out.extend((0..t.outer_rows()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }
}

const EMBED_CHUNK: usize = 128;

/// Pools every layer: position 0 for `cls`, masked mean for `avg`.
pub fn pool(
    g: &mut Graph,
    states: &LayerStates,
    mode: Pooling,
    tag: ViewTag,
) -> Result<SentenceViews> {
    let per_layer = states
        .states
        .iter()
        .map(|&s| match mode {
            Pooling::Cls => g.select_position(s, 0),
            Pooling::Avg => g.masked_mean(s, &states.lengths),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SentenceViews { per_layer, tag })
}

/// Maps every layer's vectors through the same bias-free linear head.
pub fn project(g: &mut Graph, views: &SentenceViews, head: Var) -> Result<SentenceViews> {
    let per_layer = views
        .per_layer
        .iter()
        .map(|&v| {
            let out = g.linear(v, head, None)?;
            check_norms(g, out)?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SentenceViews {
        per_layer,
        tag: views.tag,
    })
}

/// Writes `sentence_index, layer, v_0 .. v_{d'-1}` rows, tab separated.
pub fn write_embedding_dump<W: Write>(w: W, per_layer: &[Tensor]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .from_writer(w);
    let n = per_layer.first().map_or(0, Tensor::outer_rows);
    for i in 0..n {
        for (l, t) in per_layer.iter().enumerate() {
            let mut rec = vec![i.to_string(), l.to_string()];
            rec.extend(t.row(i).iter().map(|v| format!("{v:e}")));
            wr.write_record(&rec)?;
        }
    }
    wr.flush()?;
    Ok(())
}
