//! Corpus ingestion, whitespace tokenization, padded batches and the
//! synthetic data generators.

mod lexicon;
mod synth;

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub use synth::{
    probing_datasets, sentlen_bucket, synth_corpus, synth_sts, ProbeKind, CORRUPTION_RATES,
    MAX_SENTENCE_LEN, MIN_SENTENCE_LEN,
};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

/// Default maximum sequence length, CLS included.
pub const DEFAULT_MAX_SEQ_LEN: usize = 32;

/// Token to id mapping with reserved `PAD = 0`, `CLS = 1`, `UNK = 2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::Input(
                "vocabulary must start with [PAD], [CLS], [UNK]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate().skip(RESERVED.len()) {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `UNK`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Counts whitespace tokens and assigns ids to those seen at least
/// `min_count` times, ordered by frequency (descending) then lexicographically.
pub fn build_vocab(corpus: &str, min_count: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in corpus.split_whitespace() {
        if !RESERVED.contains(&tok) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Input("corpus contains no tokens".into()));
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// Token ids of a batch of sentences, padded to the longest one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub token_ids: Vec<Vec<usize>>,
    pub attention_mask: Vec<Vec<u8>>,
    /// Row lengths, CLS included.
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }

    /// Unpadded ids of all rows, concatenated.
    pub fn packed_ids(&self) -> Vec<usize> {
        self.token_ids
            .iter()
            .zip(&self.lengths)
            .flat_map(|(row, &len)| row[..len].iter().copied())
            .collect()
    }

    /// Position index of every packed token.
    pub fn packed_positions(&self) -> Vec<usize> {
        self.lengths.iter().flat_map(|&len| 0..len).collect()
    }

    /// Sub-batch of the given rows, re-padded to their longest member.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let lengths: Vec<usize> = rows.iter().map(|&r| self.lengths[r]).collect();
        let m = lengths.iter().copied().max().unwrap_or(0);
        let token_ids = rows
            .iter()
            .map(|&r| {
                let mut ids = self.token_ids[r][..self.lengths[r]].to_vec();
                ids.resize(m, PAD);
                ids
            })
            .collect();
        Batch {
            attention_mask: mask_from_lengths(&lengths, m),
            token_ids,
            lengths,
        }
    }
}

fn mask_from_lengths(lengths: &[usize], m: usize) -> Vec<Vec<u8>> {
    lengths
        .iter()
        .map(|&len| (0..m).map(|j| u8::from(j < len)).collect())
        .collect()
}

/// Tokenizes, prepends CLS, truncates to `max_len` and pads to the batch maximum.
pub fn encode_batch<S: AsRef<str>>(
    sentences: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Batch> {
    if sentences.is_empty() {
        return Err(Error::Input("cannot encode an empty sentence list".into()));
    }
    if max_len < 2 {
        return Err(Error::Config(format!(
            "max_len must be at least 2, got {max_len}"
        )));
    }
    let rows: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| {
            std::iter::once(CLS)
                .chain(s.as_ref().split_whitespace().map(|t| vocab.id(t)))
                .take(max_len)
                .collect()
        })
        .collect();
    let lengths: Vec<usize> = rows.iter().map(Vec::len).collect();
    let m = lengths.iter().copied().max().unwrap_or(1);
    let token_ids = rows
        .into_iter()
        .map(|mut r| {
            r.resize(m, PAD);
            r
        })
        .collect();
    Ok(Batch {
        attention_mask: mask_from_lengths(&lengths, m),
        token_ids,
        lengths,
    })
}

/// Sentence pair with a gold similarity in `[0, 5]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StsPair {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold_score: f64,
}

impl StsPair {
    pub fn new(
        sentence_a: impl Into<String>,
        sentence_b: impl Into<String>,
        gold_score: f64,
    ) -> Result<Self> {
        if !(gold_score.is_finite() && (0.0..=5.0).contains(&gold_score)) {
            return Err(Error::Input(format!(
                "gold score {gold_score} outside [0, 5]"
            )));
        }
        Ok(Self {
            sentence_a: sentence_a.into(),
            sentence_b: sentence_b.into(),
            gold_score,
        })
    }
}

/// Non-empty lines of a UTF-8 corpus file.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    if lines.is_empty() {
        return Err(Error::Input(format!(
            "{} contains no sentences",
            path.display()
        )));
    }
    Ok(lines)
}

/// Share of whitespace tokens in `sentences` that `vocab` knows; 1 for no tokens.
pub fn known_token_fraction<S: AsRef<str>>(sentences: &[S], vocab: &Vocabulary) -> f64 {
    let (mut known, mut total) = (0usize, 0usize);
    for tok in sentences.iter().flat_map(|s| s.as_ref().split_whitespace()) {
        total += 1;
        known += usize::from(vocab.id(tok) != UNK);
    }
    if total == 0 {
        1.0
    } else {
        known as f64 / total as f64
    }
}

pub fn corpus_lines(corpus: &str) -> Vec<String> {
    corpus
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect()
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .quoting(false)
        .flexible(false)
        .from_path(path)?)
}

fn tsv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .quote_style(csv::QuoteStyle::Never)
        .from_writer(w)
}

/// Reads `sentence_a \t sentence_b \t score` rows.
pub fn read_sts(path: &Path) -> Result<Vec<StsPair>> {
    let mut pairs = Vec::new();
    for (i, rec) in tsv_reader(path)?.records().enumerate() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::Input(format!(
                "{}:{}: expected 3 columns, got {}",
                path.display(),
                i + 1,
                rec.len()
            )));
        }
        let score: f64 = rec[2].trim().parse().map_err(|_| {
            Error::Input(format!(
                "{}:{}: bad score '{}'",
                path.display(),
                i + 1,
                &rec[2]
            ))
        })?;
        pairs.push(StsPair::new(&rec[0], &rec[1], score)?);
    }
    Ok(pairs)
}

pub fn write_sts<W: Write>(w: W, pairs: &[StsPair]) -> Result<()> {
    let mut wr = tsv_writer(w);
    for p in pairs {
        wr.write_record([
            p.sentence_a.as_str(),
            p.sentence_b.as_str(),
            &p.gold_score.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads `text \t label` rows.
pub fn read_probe(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut rows = Vec::new();
    for (i, rec) in tsv_reader(path)?.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Input(format!(
                "{}:{}: expected 2 columns",
                path.display(),
                i + 1
            )));
        }
        let label = rec[1].trim().parse().map_err(|_| {
            Error::Input(format!(
                "{}:{}: bad label '{}'",
                path.display(),
                i + 1,
                &rec[1]
            ))
        })?;
        rows.push((rec[0].to_string(), label));
    }
    Ok(rows)
}

pub fn write_probe<W: Write>(w: W, rows: &[(String, usize)]) -> Result<()> {
    let mut wr = tsv_writer(w);
    for (text, label) in rows {
        wr.write_record([text.as_str(), &label.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}
