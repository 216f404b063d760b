//! Ablation sweeps: one training run per (value, seed) cell, each cell
//! reporting dev/test Spearman and the over-smoothing diagnostics.

use std::io::Write;

use super::checkpoint::weights_digest;
use super::config::RunConfig;
use super::{summarize, train, PreparedData};
use crate::contrastive::NegativeStrategy;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SweepKind {
    /// Single negative layer `M`; `M = 0` is the plain in-batch baseline.
    Layer,
    /// Stack of the `c` layers below the last; `c = 0` is the baseline.
    Progressive,
    Tau,
    /// Projection head width.
    Dim,
    Batch,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Layer => "layer",
            SweepKind::Progressive => "progressive",
            SweepKind::Tau => "tau",
            SweepKind::Dim => "dim",
            SweepKind::Batch => "batch",
        }
    }
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "layer" => SweepKind::Layer,
            "progressive" => SweepKind::Progressive,
            "tau" => SweepKind::Tau,
            "dim" => SweepKind::Dim,
            "batch" => SweepKind::Batch,
            _ => return Err(Error::Config(format!("unknown sweep kind '{s}'"))),
        })
    }
}

impl std::fmt::Display for SweepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn as_count(kind: SweepKind, value: f64) -> Result<usize> {
    if value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
        Ok(value as usize)
    } else {
        Err(Error::Config(format!(
            "{kind} sweep needs non-negative integers, got {value}"
        )))
    }
}

/// `base` with the swept setting replaced by `value`.
pub fn apply_sweep_value(kind: SweepKind, value: f64, base: &RunConfig) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let t = &mut cfg.train;
    let num_layers = t.encoder.num_layers;
    match kind {
        SweepKind::Layer => {
            let m = as_count(kind, value)?;
            t.loss.strategy = if m == 0 {
                NegativeStrategy::none()
            } else {
                NegativeStrategy::single_layer(m)
            };
        }
        SweepKind::Progressive => {
            t.loss.strategy = NegativeStrategy::progressive(as_count(kind, value)?, num_layers)?;
        }
        SweepKind::Tau => t.loss.temperature = value,
        SweepKind::Dim => t.encoder.projection_dim = Some(as_count(kind, value)?),
        SweepKind::Batch => t.batch_size = as_count(kind, value)?,
    }
    cfg.train.validate()?;
    Ok(cfg)
}

/// Outcome of one cell; metrics are absent when training failed.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub kind: SweepKind,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
    pub best_step: Option<usize>,
    pub dev_spearman: Option<f64>,
    pub test_spearman: Option<f64>,
    pub setsim_last: Option<f64>,
    pub toksim_last: Option<f64>,
    pub final_train_loss: Option<f64>,
    /// Digest of the selected (best-dev) weights, for bitwise comparisons.
    pub weights_sha256: Option<String>,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub cells: Vec<SweepCell>,
}

fn run_cell(
    kind: SweepKind,
    value: f64,
    seed: u64,
    cfg: &RunConfig,
    data: &PreparedData,
) -> SweepCell {
    let mut cell = SweepCell {
        kind,
        value,
        seed,
        config_hash: cfg.hash(),
        best_step: None,
        dev_spearman: None,
        test_spearman: None,
        setsim_last: None,
        toksim_last: None,
        final_train_loss: None,
        weights_sha256: None,
        error: None,
    };
    let result = train(&cfg.train, &data.corpus, &data.vocab, &data.dev).and_then(|out| {
        let summary = summarize(&out.best, data)?;
        Ok((out, summary))
    });
    match result {
        Ok((out, summary)) => {
            cell.best_step = out.log.best_step;
            cell.dev_spearman = out.log.best_dev;
            cell.final_train_loss = out.log.final_loss();
            cell.test_spearman = Some(summary.test.spearman);
            cell.setsim_last = Some(summary.setsim_last());
            cell.toksim_last = Some(summary.toksim_last());
            cell.weights_sha256 = Some(weights_digest(&out.best));
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell
}

/// Trains one model per value and seed. Invalid values are rejected up
/// front; training failures are recorded in their cell and the sweep goes on.
pub fn sweep(
    kind: SweepKind,
    values: &[f64],
    base: &RunConfig,
    seeds: &[u64],
    data: &PreparedData,
) -> Result<SweepTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "a sweep needs at least one value and one seed".into(),
        ));
    }
    let configs = values
        .iter()
        .map(|&v| apply_sweep_value(kind, v, base))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(values.len() * seeds.len());
    for (&value, cfg) in values.iter().zip(&configs) {
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.train.seed = seed;
            cells.push(run_cell(kind, value, seed, &cfg, data));
        }
    }
    Ok(SweepTable { kind, cells })
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, T::to_string)
}

pub const SWEEP_HEADER: [&str; 13] = [
    "kind",
    "value",
    "seed",
    "status",
    "config_hash",
    "best_step",
    "dev_spearman",
    "test_spearman",
    "setsim_last",
    "toksim_last",
    "final_train_loss",
    "weights_sha256",
    "error",
];

/// One row per cell; failed cells have `status = failed` and empty metrics.
pub fn write_sweep_csv<W: Write>(w: W, table: &SweepTable) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(SWEEP_HEADER)?;
    for c in &table.cells {
        wr.write_record([
            c.kind.name().to_string(),
            c.value.to_string(),
            c.seed.to_string(),
            if c.ok() { "ok" } else { "failed" }.to_string(),
            c.config_hash.clone(),
            opt(&c.best_step),
            opt(&c.dev_spearman),
            opt(&c.test_spearman),
            opt(&c.setsim_last),
            opt(&c.toksim_last),
            opt(&c.final_train_loss),
            opt(&c.weights_sha256),
            opt(&c.error),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
