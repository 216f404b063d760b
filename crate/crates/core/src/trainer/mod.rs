//! Optimization loop: Adam, seeded batch sampling, dev-score tracking,
//! checkpointing, manifests and the ablation sweeps.

mod checkpoint;
mod config;
mod sweep;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    build_vocab, corpus_lines, encode_batch, read_corpus, read_sts, synth_corpus, synth_sts,
    StsPair, Vocabulary,
};
use crate::diagnostics::{curves_for_sentences, SimilarityCurve};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::evaluation::{sts_eval, EvalReport};
use crate::numerics::{Graph, Parameter};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, read_checkpoint, save_checkpoint, weights_digest,
    write_checkpoint, TrainedModel, CHECKPOINT_VERSION,
};
pub use config::{
    parse_config_text, parse_negatives, sha256_hex, DataConfig, RunConfig, TrainConfig,
    MANIFEST_PREFIX, RECOVERY_CLIP_NORM,
};
pub use sweep::{
    apply_sweep_value, sweep, write_sweep_csv, SweepCell, SweepKind, SweepTable, SWEEP_HEADER,
};

/// First and second moment estimates of every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Parameter]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
pub fn adam_step(
    params: &mut [Parameter],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[state.m.len()]));
    }
    state.t += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.len() != p.value.numel() || p.grad.numel() != p.value.numel() {
            return Err(Error::dim("adam_step", p.value.shape(), p.grad.shape()));
        }
        let grad = p.grad.data().to_vec();
        for (((w, g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut [Parameter], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub train_loss: f64,
    pub dev_spearman: Option<f64>,
}

/// Per-step training loss and the periodic dev scores.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunLog {
    pub entries: Vec<LogEntry>,
    pub best_step: Option<usize>,
    pub best_dev: Option<f64>,
}

impl RunLog {
    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.train_loss).collect()
    }

    pub fn dev_scores(&self) -> Vec<(usize, f64)> {
        self.entries
            .iter()
            .filter_map(|e| e.dev_spearman.map(|d| (e.step, d)))
            .collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.train_loss)
    }

    /// First logged step whose dev score reaches `fraction` of the best.
    pub fn first_step_reaching(&self, fraction: f64) -> Option<usize> {
        let best = self.best_dev?;
        self.dev_scores()
            .into_iter()
            .find(|&(_, d)| d >= fraction * best)
            .map(|(s, _)| s)
    }

    /// Writes `step,train_loss,dev_spearman`; steps without a dev score leave it empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "train_loss", "dev_spearman"])?;
        for e in &self.entries {
            wr.write_record([
                e.step.to_string(),
                e.train_loss.to_string(),
                e.dev_spearman.map_or_else(String::new, |d| d.to_string()),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Result of [`train`]: the best-dev and final encoders plus the log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Encoder,
    pub last: Encoder,
    pub log: RunLog,
}

/// Cycles through shuffled passes over the corpus, so no sentence repeats within a batch.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next<R: Rng>(&mut self, rng: &mut R, size: usize) -> &[usize] {
        if self.cursor + size > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let rows = &self.order[self.cursor..self.cursor + size];
        self.cursor += size;
        rows
    }
}

/// The loss of one step and the gradients it leaves in `encoder`.
pub fn training_step(
    encoder: &mut Encoder,
    cfg: &TrainConfig,
    sentences: &[&str],
    vocab: &Vocabulary,
    seeds: (u64, u64),
) -> Result<f64> {
    let batch = encode_batch(sentences, vocab, cfg.encoder.max_seq_len)?;
    let mut g = Graph::new();
    let w = encoder.bind(&mut g, true);
    let (anchor, positive) = encoder.two_view_forward(&mut g, &w, &batch, seeds)?;
    let loss = cfg.loss.compute(&mut g, &anchor, &positive)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    encoder.zero_grad();
    w.accumulate(&grads, encoder.params_mut());
    Ok(value)
}

/// Trains a fresh encoder on `corpus`, scoring `dev_pairs` every
/// `eval_every` steps and at the last step; keeps the best-dev weights.
///
/// All randomness (initialization, batch order, dropout seeds) comes from one
/// generator seeded with `config.seed`.
pub fn train(
    config: &TrainConfig,
    corpus: &[String],
    vocab: &Vocabulary,
    dev_pairs: &[StsPair],
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut enc_cfg = config.encoder.clone();
    enc_cfg.vocab_size = vocab.len();
    if corpus.len() < config.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the corpus size {}",
            config.batch_size,
            corpus.len()
        )));
    }
    let mut cfg = config.clone();
    cfg.encoder = enc_cfg.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = Encoder::new(enc_cfg, &mut rng)?;
    let mut adam = AdamState::new(encoder.params());
    let mut sampler = BatchSampler::new(corpus.len());
    let mut log = RunLog::default();
    let mut best = encoder.clone();

    for step in 1..=config.steps {
        let rows = sampler.next(&mut rng, config.batch_size);
        let sentences: Vec<&str> = rows.iter().map(|&i| corpus[i].as_str()).collect();
        let s0: u64 = rng.gen();
        let mut s1: u64 = rng.gen();
        while s1 == s0 {
            s1 = rng.gen();
        }
        let loss =
            training_step(&mut encoder, &cfg, &sentences, vocab, (s0, s1)).map_err(
                |e| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        step,
                        loss: f64::NAN,
                    },
                    other => other,
                },
            )?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(c) = config.clip_norm {
            clip_grad_norm(encoder.params_mut(), c);
        }
        adam_step(
            encoder.params_mut(),
            &mut adam,
            config.lr,
            config.adam_betas,
            config.adam_eps,
        )?;
        if encoder
            .params()
            .iter()
            .any(|p| p.value.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged { step, loss });
        }

        let dev_spearman = if step % config.eval_every == 0 || step == config.steps {
            let score = sts_eval(&encoder, vocab, dev_pairs, None)?.spearman;
            if log.best_dev.is_none_or(|b| score > b) {
                log.best_dev = Some(score);
                log.best_step = Some(step);
                best = encoder.clone();
            }
            Some(score)
        } else {
            None
        };
        log.entries.push(LogEntry {
            step,
            train_loss: loss,
            dev_spearman,
        });
    }
    encoder.zero_grad();
    best.zero_grad();
    Ok(TrainOutcome {
        best,
        last: encoder,
        log,
    })
}

/// Corpus, vocabulary and STS splits of a [`DataConfig`].
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub corpus: Vec<String>,
    pub vocab: Vocabulary,
    pub dev: Vec<StsPair>,
    pub test: Vec<StsPair>,
}

impl PreparedData {
    /// Reads the configured files or generates the synthetic sets.
    ///
    /// The vocabulary also covers the STS sentences, so paraphrase synonyms
    /// that never occur in the corpus still get (untrained) embeddings.
    pub fn from_config(cfg: &DataConfig) -> Result<Self> {
        let corpus = match &cfg.corpus_file {
            Some(p) => read_corpus(p)?,
            None => {
                if cfg.corpus_size == 0 {
                    return Err(Error::Config("data.corpus_size must be positive".into()));
                }
                corpus_lines(&synth_corpus(cfg.corpus_size, cfg.corpus_seed))
            }
        };
        let dev = match &cfg.dev_file {
            Some(p) => read_sts(p)?,
            None => synth_sts(cfg.dev_size, cfg.dev_seed),
        };
        let test = match &cfg.test_file {
            Some(p) => read_sts(p)?,
            None => synth_sts(cfg.test_size, cfg.test_seed),
        };
        let mut text = corpus.join("\n");
        for p in dev.iter().chain(&test) {
            text.push('\n');
            text.push_str(&p.sentence_a);
            text.push('\n');
            text.push_str(&p.sentence_b);
        }
        let vocab = build_vocab(&text, cfg.min_count)?;
        Ok(Self {
            corpus,
            vocab,
            dev,
            test,
        })
    }
}

/// Test-set metrics of a trained encoder.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub test: EvalReport,
    /// Adjacent-layer sentence similarity on the test sentences.
    pub setsim: SimilarityCurve,
    /// Per-layer token similarity on the test sentences.
    pub toksim: SimilarityCurve,
}

impl RunSummary {
    /// SetSim between the last two layers.
    pub fn setsim_last(&self) -> f64 {
        self.setsim
            .last()
            .expect("setsim has one point per layer pair")
    }

    pub fn toksim_last(&self) -> f64 {
        self.toksim.last().expect("toksim has one point per layer")
    }
}

/// Distinct first sentences of the test pairs: the diagnostics dataset.
pub fn diagnostic_sentences(pairs: &[StsPair]) -> Vec<&str> {
    let mut seen = std::collections::HashSet::new();
    pairs
        .iter()
        .map(|p| p.sentence_a.as_str())
        .filter(|s| seen.insert(*s))
        .collect()
}

/// Test Spearman and over-smoothing curves (training pooling, CLS excluded from TokSim).
pub fn summarize(encoder: &Encoder, data: &PreparedData) -> Result<RunSummary> {
    let test = sts_eval(encoder, &data.vocab, &data.test, None)?;
    let sentences = diagnostic_sentences(&data.test);
    let (setsim, toksim) = curves_for_sentences(
        encoder,
        &data.vocab,
        &sentences,
        encoder.config().pooling,
        false,
    )?;
    Ok(RunSummary {
        test,
        setsim,
        toksim,
    })
}

/// Version string recorded in manifests.
pub const PACKAGE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// `key=value` manifest: metadata under `run.*`, then the canonical config.
/// Contains no timestamps, so equal runs produce equal manifests, and it
/// parses back as a config file.
pub fn manifest_text(cfg: &RunConfig, command: &str, extra: &[(&str, String)]) -> String {
    let mut out = String::new();
    let mut meta: Vec<(&str, String)> = vec![
        ("run.package", env!("CARGO_PKG_NAME").to_string()),
        ("run.version", PACKAGE_VERSION.to_string()),
        ("run.checkpoint_version", CHECKPOINT_VERSION.to_string()),
        ("run.command", command.to_string()),
        ("run.config_hash", cfg.hash()),
        ("run.seed", cfg.train.seed.to_string()),
    ];
    meta.extend(extra.iter().cloned());
    for (k, v) in meta {
        out.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in cfg.to_pairs() {
        out.push_str(&format!("{k}={v}\n"));
    }
    out
}

pub fn write_manifest(
    path: &Path,
    cfg: &RunConfig,
    command: &str,
    extra: &[(&str, String)],
) -> Result<()> {
    std::fs::write(path, manifest_text(cfg, command, extra))?;
    Ok(())
}
