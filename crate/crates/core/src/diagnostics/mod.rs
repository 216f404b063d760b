//! Over-smoothing measurements: intra-layer token similarity (TokSim),
//! adjacent-layer sentence similarity (SetSim), per-layer curves and token
//! similarity matrices. Everything runs on frozen weights without dropout.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{encode_batch, Batch, Vocabulary};
use crate::encoder::{Encoder, Pooling};
use crate::error::{Error, Result};
use crate::numerics::{cosine, Tensor, MIN_NORM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    TokSim,
    SetSim,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::TokSim => "toksim",
            Metric::SetSim => "setsim",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per layer (TokSim) or per adjacent layer pair (SetSim, indexed by the lower layer).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityCurve {
    pub metric: Metric,
    pub layer_index: Vec<usize>,
    pub value: Vec<f64>,
}

impl SimilarityCurve {
    /// Value at `layer`, if the curve has that point.
    pub fn at(&self, layer: usize) -> Option<f64> {
        self.layer_index
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.value[i])
    }

    pub fn last(&self) -> Option<f64> {
        self.value.last().copied()
    }
}

/// Pairwise token cosines of one sentence at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSimMatrix {
    pub tokens: Vec<String>,
    /// `[m x m]`, symmetric with unit diagonal.
    pub matrix: Tensor,
}

/// Mean cosine over ordered pairs of distinct unmasked tokens of `[m x d]` states.
///
/// Uses `sum_{u != v} cos(x_u, x_v) = |sum_u x_u/|x_u||^2 - m`.
pub fn tok_sim(token_states: &Tensor, mask: &[bool]) -> Result<f64> {
    if token_states.ndim() != 2 || token_states.outer_rows() != mask.len() {
        return Err(Error::dim("tok_sim", token_states.shape(), &[mask.len()]));
    }
    let d = token_states.last_dim();
    let mut acc = vec![0.0; d];
    let mut m = 0usize;
    for (u, _) in mask.iter().enumerate().filter(|(_, &keep)| keep) {
        let x = token_states.row(u);
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n.is_nan() || n <= MIN_NORM {
            return Err(Error::DegenerateVector(format!("token {u} has norm {n}")));
        }
        acc.iter_mut().zip(x).for_each(|(a, v)| *a += v / n);
        m += 1;
    }
    if m < 2 {
        return Err(Error::UndefinedMetric(format!(
            "tok_sim needs at least two unmasked tokens, got {m}"
        )));
    }
    let sq: f64 = acc.iter().map(|a| a * a).sum();
    let mf = m as f64;
    Ok(((sq - mf) / (mf * (mf - 1.0))).clamp(-1.0, 1.0))
}

/// Cosine between one sentence's pooled vectors at two adjacent layers.
pub fn set_sim(s_lower: &[f64], s_upper: &[f64]) -> Result<f64> {
    cosine(s_lower, s_upper)
}

/// Which token positions count as content for TokSim.
pub fn content_mask(len: usize, include_cls: bool) -> Vec<bool> {
    (0..len).map(|j| include_cls || j > 0).collect()
}

/// Dataset-mean SetSim (layers `l, l+1` for `l = 0..L-1`) and TokSim (`l = 0..L`).
///
/// Both are macro averages: per-sentence values averaged over sentences.
/// Sentences with fewer than two content tokens have no TokSim and are
/// skipped in that curve only.
pub fn layer_curves(
    encoder: &Encoder,
    batches: &[Batch],
    pooling: Pooling,
    include_cls: bool,
) -> Result<(SimilarityCurve, SimilarityCurve)> {
    let num_layers = encoder.config().num_layers;
    let mut set_sum = vec![0.0; num_layers];
    let mut tok_sum = vec![0.0; num_layers + 1];
    let (mut n_set, mut n_tok) = (0usize, 0usize);
    for batch in batches {
        let out = encoder.frozen_with_pooling(batch, pooling)?;
        for i in 0..batch.size() {
            for (l, s) in set_sum.iter_mut().enumerate() {
                *s += set_sim(
                    out.sentence_vectors[l].row(i),
                    out.sentence_vectors[l + 1].row(i),
                )?;
            }
            n_set += 1;
            let mask = content_mask(batch.lengths[i], include_cls);
            if mask.iter().filter(|&&k| k).count() >= 2 {
                for (l, s) in tok_sum.iter_mut().enumerate() {
                    *s += tok_sim(&out.token_states[l][i], &mask)?;
                }
                n_tok += 1;
            }
        }
    }
    if n_set == 0 {
        return Err(Error::Input(
            "layer_curves needs a non-empty dataset".into(),
        ));
    }
    if n_tok == 0 {
        return Err(Error::UndefinedMetric(
            "no sentence has two content tokens".into(),
        ));
    }
    let setsim = SimilarityCurve {
        metric: Metric::SetSim,
        layer_index: (0..num_layers).collect(),
        value: set_sum.iter().map(|s| s / n_set as f64).collect(),
    };
    let toksim = SimilarityCurve {
        metric: Metric::TokSim,
        layer_index: (0..=num_layers).collect(),
        value: tok_sum.iter().map(|s| s / n_tok as f64).collect(),
    };
    Ok((setsim, toksim))
}

/// Encodes `sentences` in chunks and computes [`layer_curves`].
pub fn curves_for_sentences<S: AsRef<str>>(
    encoder: &Encoder,
    vocab: &Vocabulary,
    sentences: &[S],
    pooling: Pooling,
    include_cls: bool,
) -> Result<(SimilarityCurve, SimilarityCurve)> {
    if sentences.is_empty() {
        return Err(Error::Input(
            "layer_curves needs a non-empty dataset".into(),
        ));
    }
    let batches = sentences
        .chunks(128)
        .map(|c| encode_batch(c, vocab, encoder.config().max_seq_len))
        .collect::<Result<Vec<_>>>()?;
    layer_curves(encoder, &batches, pooling, include_cls)
}

/// Token cosine matrix of `sentence` at `layer`; the CLS row is kept only with `include_cls`.
pub fn token_matrix(
    encoder: &Encoder,
    vocab: &Vocabulary,
    sentence: &str,
    layer: usize,
    include_cls: bool,
) -> Result<TokenSimMatrix> {
    let num_layers = encoder.config().num_layers;
    if layer > num_layers {
        return Err(Error::Config(format!(
            "layer {layer} exceeds the last layer {num_layers}"
        )));
    }
    let batch = encode_batch(&[sentence], vocab, encoder.config().max_seq_len)?;
    let out = encoder.frozen(&batch)?;
    let states = &out.token_states[layer][0];
    let mut tokens: Vec<String> = std::iter::once("[CLS]")
        .chain(sentence.split_whitespace())
        .take(batch.lengths[0])
        .map(str::to_string)
        .collect();
    let first = usize::from(!include_cls);
    tokens.drain(..first);
    let m = tokens.len();
    if m == 0 {
        return Err(Error::Input("sentence has no tokens".into()));
    }
    let mut matrix = vec![0.0; m * m];
    for u in 0..m {
        matrix[u * m + u] = 1.0;
        for v in u + 1..m {
            let c = cosine(states.row(first + u), states.row(first + v))?;
            matrix[u * m + v] = c;
            matrix[v * m + u] = c;
        }
    }
    Ok(TokenSimMatrix {
        tokens,
        matrix: Tensor::new(vec![m, m], matrix)?,
    })
}

/// A curve tagged with the model it came from.
#[derive(Clone, Debug)]
pub struct TaggedCurve<'a> {
    pub curve: &'a SimilarityCurve,
    pub model_tag: &'a str,
    pub seed: u64,
}

/// Writes `metric,layer,value,model_tag,seed` rows.
pub fn write_curves_csv<W: Write>(w: W, curves: &[TaggedCurve<'_>]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["metric", "layer", "value", "model_tag", "seed"])?;
    for c in curves {
        for (l, v) in c.curve.layer_index.iter().zip(&c.curve.value) {
            wr.write_record([
                c.curve.metric.name(),
                &l.to_string(),
                &v.to_string(),
                c.model_tag,
                &c.seed.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Writes the matrix with token strings as header row and first column.
pub fn write_matrix_csv<W: Write>(w: W, m: &TokenSimMatrix) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let header: Vec<&str> = std::iter::once("")
        .chain(m.tokens.iter().map(String::as_str))
        .collect();
    wr.write_record(&header)?;
    let n = m.tokens.len();
    for (u, tok) in m.tokens.iter().enumerate() {
        let mut rec = vec![tok.clone()];
        rec.extend((0..n).map(|v| m.matrix.at(&[u, v]).to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}
