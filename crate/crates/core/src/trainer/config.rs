//! Flat `key = value` run configuration with dotted section names, its
//! canonical serialization and hash.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::contrastive::{Denominator, LossConfig, NegativeStrategy};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Optimization settings of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
    pub loss: LossConfig,
    /// `vocab_size` is filled in from the vocabulary at training time.
    pub encoder: EncoderConfig,
}

/// Gradient-norm clip offered for divergence recovery.
pub const RECOVERY_CLIP_NORM: f64 = 5.0;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            lr: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 50,
            clip_norm: None,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Checks everything except `encoder.vocab_size`, which comes from the data.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail(format!("adam betas ({b1}, {b2}) must lie in [0, 1)"));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return fail(format!("adam eps must be positive, got {}", self.adam_eps));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("clip_norm must be positive, got {c}"));
            }
        }
        let mut enc = self.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(3);
        enc.validate()?;
        self.loss.validate(self.encoder.num_layers)
    }
}

/// Where the corpus and STS splits come from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub dev_size: usize,
    pub dev_seed: u64,
    pub test_size: usize,
    pub test_seed: u64,
    pub min_count: usize,
    /// Files override the synthetic generators when set.
    pub corpus_file: Option<PathBuf>,
    pub dev_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_size: 10_000,
            corpus_seed: 0,
            dev_size: 500,
            dev_seed: 1,
            test_size: 1000,
            test_seed: 2,
            min_count: 1,
            corpus_file: None,
            dev_file: None,
            test_file: None,
        }
    }
}

/// Full description of a run: optimization plus data.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Keys reserved for manifest metadata; ignored when a manifest is read back as a config.
pub const MANIFEST_PREFIX: &str = "run.";

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value '{value}' for {key} (expected true or false)"
        ))),
    }
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(String::new, |p| p.display().to_string())
}

/// Parses `none`, `layer:M` / `single_layer:M` or `stack:c` / `progressive:c`.
pub fn parse_negatives(value: &str, num_layers: usize) -> Result<NegativeStrategy> {
    let bad = || Error::Config(format!("bad value '{value}' for loss.negatives"));
    if value == "none" {
        return Ok(NegativeStrategy::none());
    }
    let (kind, n) = value.split_once(':').ok_or_else(bad)?;
    let n: usize = n.parse().map_err(|_| bad())?;
    let s = match kind {
        "layer" | "single_layer" => NegativeStrategy::single_layer(n),
        "stack" | "progressive" => NegativeStrategy::progressive(n, num_layers)?,
        _ => return Err(bad()),
    };
    s.validate(num_layers)?;
    Ok(s)
}

fn parse_denominator(value: &str) -> Result<Denominator> {
    match value {
        "positives" => Ok(Denominator::Positives),
        "anchors" => Ok(Denominator::Anchors),
        _ => Err(Error::Config(format!(
            "bad value '{value}' for loss.denominator"
        ))),
    }
}

fn denominator_str(d: Denominator) -> &'static str {
    match d {
        Denominator::Positives => "positives",
        Denominator::Anchors => "anchors",
    }
}

impl RunConfig {
    /// Canonical `(key, value)` list; parsing it back gives the same config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let e = &t.encoder;
        let l = &t.loss;
        let d = &self.data;
        let pairs: Vec<(&str, String)> = vec![
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.adam_betas.0.to_string()),
            ("train.beta2", t.adam_betas.1.to_string()),
            ("train.eps", t.adam_eps.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.clip_norm", opt_str(&t.clip_norm)),
            ("loss.temperature", l.temperature.to_string()),
            ("loss.negatives", l.strategy.to_string()),
            ("loss.detach_negatives", l.detach_negatives.to_string()),
            (
                "loss.denominator",
                denominator_str(l.denominator).to_string(),
            ),
            (
                "loss.cross_batch_intermediate",
                l.cross_batch_intermediate.to_string(),
            ),
            ("encoder.num_layers", e.num_layers.to_string()),
            ("encoder.hidden_dim", e.hidden_dim.to_string()),
            ("encoder.num_heads", e.num_heads.to_string()),
            ("encoder.ffn_dim", e.ffn_dim.to_string()),
            ("encoder.dropout", e.dropout.to_string()),
            ("encoder.max_seq_len", e.max_seq_len.to_string()),
            ("encoder.pooling", e.pooling.to_string()),
            ("encoder.projection_dim", opt_str(&e.projection_dim)),
            ("data.corpus_size", d.corpus_size.to_string()),
            ("data.corpus_seed", d.corpus_seed.to_string()),
            ("data.dev_size", d.dev_size.to_string()),
            ("data.dev_seed", d.dev_seed.to_string()),
            ("data.test_size", d.test_size.to_string()),
            ("data.test_seed", d.test_seed.to_string()),
            ("data.min_count", d.min_count.to_string()),
            ("data.corpus_file", path_str(&d.corpus_file)),
            ("data.dev_file", path_str(&d.dev_file)),
            ("data.test_file", path_str(&d.test_file)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Every recognised key.
    pub fn keys() -> Vec<String> {
        RunConfig::default()
            .to_pairs()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    /// Defaults overlaid with `pairs`; unknown keys are rejected.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(pairs)?;
        Ok(cfg)
    }

    /// Overlays `pairs` onto this config. `loss.negatives` is resolved after
    /// the encoder keys so `stack:c` sees the final layer count.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut negatives = None;
        for (key, value) in pairs {
            let v = value.as_str();
            let t = &mut self.train;
            let d = &mut self.data;
            match key.as_str() {
                "train.steps" => t.steps = parse(key, v)?,
                "train.batch_size" => t.batch_size = parse(key, v)?,
                "train.lr" => t.lr = parse(key, v)?,
                "train.beta1" => t.adam_betas.0 = parse(key, v)?,
                "train.beta2" => t.adam_betas.1 = parse(key, v)?,
                "train.eps" => t.adam_eps = parse(key, v)?,
                "train.seed" => t.seed = parse(key, v)?,
                "train.eval_every" => t.eval_every = parse(key, v)?,
                "train.clip_norm" => t.clip_norm = parse_opt(key, v)?,
                "loss.temperature" => t.loss.temperature = parse(key, v)?,
                "loss.negatives" => negatives = Some(v.to_string()),
                "loss.detach_negatives" => t.loss.detach_negatives = parse_bool(key, v)?,
                "loss.denominator" => t.loss.denominator = parse_denominator(v)?,
                "loss.cross_batch_intermediate" => {
                    t.loss.cross_batch_intermediate = parse_bool(key, v)?
                }
                "encoder.num_layers" => t.encoder.num_layers = parse(key, v)?,
                "encoder.hidden_dim" => t.encoder.hidden_dim = parse(key, v)?,
                "encoder.num_heads" => t.encoder.num_heads = parse(key, v)?,
                "encoder.ffn_dim" => t.encoder.ffn_dim = parse(key, v)?,
                "encoder.dropout" => t.encoder.dropout = parse(key, v)?,
                "encoder.max_seq_len" => t.encoder.max_seq_len = parse(key, v)?,
                "encoder.pooling" => t.encoder.pooling = v.parse()?,
                "encoder.projection_dim" => t.encoder.projection_dim = parse_opt(key, v)?,
                "data.corpus_size" => d.corpus_size = parse(key, v)?,
                "data.corpus_seed" => d.corpus_seed = parse(key, v)?,
                "data.dev_size" => d.dev_size = parse(key, v)?,
                "data.dev_seed" => d.dev_seed = parse(key, v)?,
                "data.test_size" => d.test_size = parse(key, v)?,
                "data.test_seed" => d.test_seed = parse(key, v)?,
                "data.min_count" => d.min_count = parse(key, v)?,
                "data.corpus_file" => d.corpus_file = parse_path(v),
                "data.dev_file" => d.dev_file = parse_path(v),
                "data.test_file" => d.test_file = parse_path(v),
                _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
            }
        }
        if let Some(n) = negatives {
            self.train.loss.strategy = parse_negatives(&n, self.train.encoder.num_layers)?;
        }
        Ok(())
    }

    /// Parses config text and overlays it on the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_config_text(text)?)
    }

    /// Canonical text form, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Lower-case hex of the SHA-256 digest of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads `key = value` lines; `#` starts a comment line. Manifest metadata
/// keys (`run.*`) are skipped and duplicate keys are rejected.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                i + 1
            ))
        })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.starts_with(MANIFEST_PREFIX) {
            continue;
        }
        if seen.insert(k.clone(), i + 1).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key '{k}'",
                i + 1
            )));
        }
        pairs.push((k, v));
    }
    Ok(pairs)
}
