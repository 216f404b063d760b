//! Spearman-correlation STS evaluation and linear probing of frozen
//! sentence representations.

use std::io::Write;

use crate::data::{ProbeKind, StsPair, Vocabulary};
use crate::encoder::{Encoder, Pooling};
use crate::error::{Error, Result};
use crate::numerics::cosine;

/// Ridge penalty of the probe classifier.
pub const PROBE_L2: f64 = 1e-4;
/// Probe gradient-descent stopping rule.
pub const PROBE_GRAD_TOL: f64 = 1e-6;
pub const PROBE_MAX_ITERS: usize = 5000;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub spearman: f64,
    pub n_pairs: usize,
    pub pooling: Pooling,
    pub layer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub task: Option<ProbeKind>,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub iterations: usize,
}

/// Fractional ranks starting at 1; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; errors when either sequence is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("correlation", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::Input(format!(
            "correlation needs at least 2 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Input("correlation inputs must be finite".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a sequence is constant".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("spearman", &[x.len()], &[y.len()]));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Input("spearman inputs must be finite".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Spearman between gold scores and cosines of layer-`layer` vectors
/// (default: last layer), pooled as the encoder was trained.
pub fn sts_eval(
    encoder: &Encoder,
    vocab: &Vocabulary,
    pairs: &[StsPair],
    layer: Option<usize>,
) -> Result<EvalReport> {
    let layer = layer.unwrap_or(encoder.config().num_layers);
    let predicted = predicted_similarities(encoder, vocab, pairs, layer)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold_score).collect();
    Ok(EvalReport {
        spearman: spearman(&predicted, &gold)?,
        n_pairs: pairs.len(),
        pooling: encoder.config().pooling,
        layer,
    })
}

/// Cosine similarity of every pair's two sentence vectors.
pub fn predicted_similarities(
    encoder: &Encoder,
    vocab: &Vocabulary,
    pairs: &[StsPair],
    layer: usize,
) -> Result<Vec<f64>> {
    if pairs.len() < 2 {
        return Err(Error::Input(format!(
            "STS evaluation needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let a: Vec<&str> = pairs.iter().map(|p| p.sentence_a.as_str()).collect();
    let b: Vec<&str> = pairs.iter().map(|p| p.sentence_b.as_str()).collect();
    let ea = encoder.embed_sentences(&a, vocab, layer)?;
    let eb = encoder.embed_sentences(&b, vocab, layer)?;
    ea.iter().zip(&eb).map(|(u, v)| cosine(u, v)).collect()
}

/// Multinomial logistic regression on standardized features, fitted by
/// full-batch gradient descent; returns test accuracy.
pub fn linear_probe(
    train: &[(Vec<f64>, usize)],
    test: &[(Vec<f64>, usize)],
) -> Result<ProbeReport> {
    let Some((first, _)) = train.first() else {
        return Err(Error::Input("probe training set is empty".into()));
    };
    let d = first.len();
    if d == 0 || train.iter().chain(test).any(|(x, _)| x.len() != d) {
        return Err(Error::Input(
            "probe features must share one non-zero width".into(),
        ));
    }
    if train
        .iter()
        .chain(test)
        .any(|(x, _)| x.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Input("probe features must be finite".into()));
    }
    let classes = train
        .iter()
        .chain(test)
        .map(|(_, y)| y + 1)
        .max()
        .unwrap_or(0);
    let mut present = vec![false; classes];
    train.iter().for_each(|&(_, y)| present[y] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Input(
            "probe training set holds a single class".into(),
        ));
    }

    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| train.iter().map(|(x, _)| x[j]).sum::<f64>() / n)
        .collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let var = train
                .iter()
                .map(|(x, _)| (x[j] - mean[j]).powi(2))
                .sum::<f64>()
                / n;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let standardize =
        |x: &[f64]| -> Vec<f64> { (0..d).map(|j| (x[j] - mean[j]) / std[j]).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(|(x, _)| standardize(x)).collect();

    // Softmax cross-entropy has Hessian bounded by 0.5 |X|_2^2 / n; the
    // Frobenius norm (plus the bias column) bounds |X|_2.
    let frob: f64 = xs
        .iter()
        .map(|x| x.iter().map(|v| v * v).sum::<f64>() + 1.0)
        .sum();
    let lipschitz = 0.5 * frob.min(n * (d as f64 + 1.0)) / n + PROBE_L2;
    let lr = 1.0 / lipschitz;

    // Weights `[classes x (d + 1)]`, bias last.
    let width = d + 1;
    let mut w = vec![0.0; classes * width];
    let mut grad = vec![0.0; classes * width];
    let mut probs = vec![0.0; classes];
    let mut iterations = 0;
    while iterations < PROBE_MAX_ITERS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, &(_, y)) in xs.iter().zip(train) {
            logits(&w, x, &mut probs);
            softmax_in_place(&mut probs);
            probs[y] -= 1.0;
            for (c, &p) in probs.iter().enumerate() {
                let row = &mut grad[c * width..(c + 1) * width];
                row[..d].iter_mut().zip(x).for_each(|(g, v)| *g += p * v);
                row[d] += p;
            }
        }
        let mut norm2 = 0.0;
        for (i, g) in grad.iter_mut().enumerate() {
            *g /= n;
            if i % width != d {
                *g += PROBE_L2 * w[i];
            }
            norm2 += *g * *g;
        }
        if norm2.sqrt() < PROBE_GRAD_TOL {
            break;
        }
        w.iter_mut().zip(&grad).for_each(|(wi, g)| *wi -= lr * g);
        iterations += 1;
    }

    let accuracy_of = |rows: &mut dyn Iterator<Item = (Vec<f64>, usize)>, count: usize| -> f64 {
        let mut scores = vec![0.0; classes];
        let hits = rows
            .filter(|(x, y)| {
                logits(&w, x, &mut scores);
                argmax(&scores) == *y
            })
            .count();
        hits as f64 / count.max(1) as f64
    };
    let train_accuracy = accuracy_of(
        &mut xs.iter().cloned().zip(train.iter().map(|t| t.1)),
        train.len(),
    );
    let accuracy = accuracy_of(
        &mut test.iter().map(|(x, y)| (standardize(x), *y)),
        test.len(),
    );
    Ok(ProbeReport {
        task: None,
        accuracy,
        train_accuracy,
        n_train: train.len(),
        n_test: test.len(),
        iterations,
    })
}

fn logits(w: &[f64], x: &[f64], out: &mut [f64]) {
    let width = x.len() + 1;
    for (c, o) in out.iter_mut().enumerate() {
        let row = &w[c * width..(c + 1) * width];
        *o = row[..x.len()]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + row[x.len()];
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    z.iter_mut().for_each(|v| {
        *v = (*v - max).exp();
        s += *v;
    });
    z.iter_mut().for_each(|v| *v /= s);
}

/// Index of the largest score; the first one wins ties.
fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Probes last-layer embeddings (training pooling) on labelled sentences.
pub fn probe_task(
    encoder: &Encoder,
    vocab: &Vocabulary,
    task: ProbeKind,
    train: &[(String, usize)],
    test: &[(String, usize)],
) -> Result<ProbeReport> {
    let layer = encoder.config().num_layers;
    let embed = |rows: &[(String, usize)]| -> Result<Vec<(Vec<f64>, usize)>> {
        let texts: Vec<&str> = rows.iter().map(|(t, _)| t.as_str()).collect();
        let e = encoder.embed_sentences(&texts, vocab, layer)?;
        Ok(e.into_iter().zip(rows.iter().map(|r| r.1)).collect())
    };
    let mut report = linear_probe(&embed(train)?, &embed(test)?)?;
    report.task = Some(task);
    Ok(report)
}

/// Writes `metric,value,config_hash,seed` rows.
pub fn write_report_csv<W: Write>(
    w: W,
    rows: &[(&str, f64)],
    config_hash: &str,
    seed: u64,
) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["metric", "value", "config_hash", "seed"])?;
    for (metric, value) in rows {
        wr.write_record([*metric, &value.to_string(), config_hash, &seed.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

impl EvalReport {
    pub fn csv_rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("spearman", self.spearman),
            ("n_pairs", self.n_pairs as f64),
            ("layer", self.layer as f64),
        ]
    }
}

impl ProbeReport {
    pub fn csv_rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("accuracy", self.accuracy),
            ("train_accuracy", self.train_accuracy),
            ("n_train", self.n_train as f64),
            ("n_test", self.n_test as f64),
            ("iterations", self.iterations as f64),
        ]
    }
}
