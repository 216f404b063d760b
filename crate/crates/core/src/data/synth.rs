//! Templated sentence generators: training corpus, STS-style pairs and the
//! three probing tasks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::lexicon::{self, class_words};
use super::StsPair;
use crate::error::{Error, Result};

/// Shortest and longest generated corpus sentence, in tokens.
pub const MIN_SENTENCE_LEN: usize = 4;
pub const MAX_SENTENCE_LEN: usize = 20;

/// Corruption rates of the paraphrase generator; the gold score is `5 (1 - r)`.
pub const CORRUPTION_RATES: [f64; 5] = [0.0, 0.1, 0.25, 0.5, 1.0];

struct Lexicon {
    nouns: Vec<&'static str>,
    transitive: Vec<&'static str>,
    intransitive: Vec<&'static str>,
    adjectives: Vec<&'static str>,
    adverbs: Vec<&'static str>,
}

impl Lexicon {
    fn new() -> Self {
        Self {
            nouns: class_words(lexicon::NOUN_PAIRS, lexicon::NOUNS),
            transitive: class_words(lexicon::TRANSITIVE_PAIRS, lexicon::TRANSITIVE),
            intransitive: class_words(lexicon::INTRANSITIVE_PAIRS, lexicon::INTRANSITIVE),
            adjectives: class_words(lexicon::ADJECTIVE_PAIRS, lexicon::ADJECTIVES),
            adverbs: class_words(lexicon::ADVERB_PAIRS, lexicon::ADVERBS),
        }
    }
}

fn pick<R: Rng>(rng: &mut R, words: &[&'static str]) -> &'static str {
    words[rng.gen_range(0..words.len())]
}

#[derive(Clone, Debug)]
struct NounPhrase {
    det: &'static str,
    adjs: Vec<&'static str>,
    noun: &'static str,
}

impl NounPhrase {
    fn sample<R: Rng>(rng: &mut R, lex: &Lexicon, max_adjs: usize) -> Self {
        let n_adj = rng.gen_range(0..=max_adjs);
        Self {
            det: pick(rng, lexicon::DETERMINERS),
            adjs: (0..n_adj).map(|_| pick(rng, &lex.adjectives)).collect(),
            noun: pick(rng, &lex.nouns),
        }
    }

    fn len(&self) -> usize {
        2 + self.adjs.len()
    }

    fn render(&self, out: &mut Vec<&'static str>) {
        out.push(self.det);
        out.extend(&self.adjs);
        out.push(self.noun);
    }
}

/// Subject, verb, optional object, prepositional phrases and an adverb.
#[derive(Clone, Debug)]
struct Clause {
    subject: NounPhrase,
    verb: &'static str,
    object: Option<NounPhrase>,
    pps: Vec<(&'static str, NounPhrase)>,
    adverb: Option<&'static str>,
}

impl Clause {
    fn len(&self) -> usize {
        self.subject.len()
            + 1
            + self.object.as_ref().map_or(0, NounPhrase::len)
            + self.pps.iter().map(|(_, np)| 1 + np.len()).sum::<usize>()
            + usize::from(self.adverb.is_some())
    }

    fn render(&self, out: &mut Vec<&'static str>) {
        self.subject.render(out);
        out.push(self.verb);
        if let Some(o) = &self.object {
            o.render(out);
        }
        for (p, np) in &self.pps {
            out.push(p);
            np.render(out);
        }
        if let Some(a) = self.adverb {
            out.push(a);
        }
    }

    fn words(&self) -> Vec<&'static str> {
        let mut out = Vec::with_capacity(self.len());
        self.render(&mut out);
        out
    }

    fn transitive<R: Rng>(rng: &mut R, lex: &Lexicon) -> Self {
        Self {
            subject: NounPhrase::sample(rng, lex, 0),
            verb: pick(rng, &lex.transitive),
            object: Some(NounPhrase::sample(rng, lex, 0)),
            pps: Vec::new(),
            adverb: None,
        }
    }

    fn intransitive<R: Rng>(rng: &mut R, lex: &Lexicon) -> Self {
        Self {
            subject: NounPhrase::sample(rng, lex, 0),
            verb: pick(rng, &lex.intransitive),
            object: None,
            pps: Vec::new(),
            adverb: None,
        }
    }

    /// Free-form corpus clause.
    fn sample<R: Rng>(rng: &mut R, lex: &Lexicon) -> Self {
        let subject = NounPhrase::sample(rng, lex, 2);
        let transitive = rng.gen_bool(0.6);
        let (verb, object) = if transitive {
            (
                pick(rng, &lex.transitive),
                Some(NounPhrase::sample(rng, lex, 2)),
            )
        } else {
            (pick(rng, &lex.intransitive), None)
        };
        let n_pp = match rng.gen_range(0..10) {
            0..=4 => 0,
            5..=7 => 1,
            8 => 2,
            _ => 3,
        };
        let pps = (0..n_pp)
            .map(|_| {
                (
                    pick(rng, lexicon::PREPOSITIONS),
                    NounPhrase::sample(rng, lex, 1),
                )
            })
            .collect();
        let adverb = rng.gen_bool(0.4).then(|| pick(rng, &lex.adverbs));
        Self {
            subject,
            verb,
            object,
            pps,
            adverb,
        }
    }

    /// Grows a minimal clause with modifiers until it has exactly `target`
    /// tokens, restarting whenever the remaining gap cannot be filled.
    fn with_length<R: Rng>(rng: &mut R, lex: &Lexicon, target: usize) -> Self {
        loop {
            if let Some(c) = Self::try_with_length(rng, lex, target) {
                return c;
            }
        }
    }

    fn try_with_length<R: Rng>(rng: &mut R, lex: &Lexicon, target: usize) -> Option<Self> {
        let mut c = if target >= 5 && rng.gen_bool(0.5) {
            Self::transitive(rng, lex)
        } else {
            Self::intransitive(rng, lex)
        };
        while c.len() < target {
            let remaining = target - c.len();
            let mut moves: Vec<u8> = Vec::new();
            if c.adverb.is_none() {
                moves.push(0);
            }
            if c.subject.adjs.len() < 2 || c.object.as_ref().is_some_and(|o| o.adjs.len() < 2) {
                moves.push(1);
            }
            if remaining >= 3 && c.pps.len() < 4 {
                moves.push(2);
            }
            if c.pps.iter().any(|(_, np)| np.adjs.len() < 2) {
                moves.push(3);
            }
            match moves.choose(rng) {
                Some(0) => c.adverb = Some(pick(rng, &lex.adverbs)),
                Some(1) => {
                    let adj = pick(rng, &lex.adjectives);
                    let subj_open = c.subject.adjs.len() < 2;
                    let obj_open = c.object.as_ref().is_some_and(|o| o.adjs.len() < 2);
                    if subj_open && (!obj_open || rng.gen_bool(0.5)) {
                        c.subject.adjs.push(adj);
                    } else if let Some(o) = c.object.as_mut() {
                        o.adjs.push(adj);
                    }
                }
                Some(2) => {
                    let np = NounPhrase::sample(rng, lex, 0);
                    c.pps.push((pick(rng, lexicon::PREPOSITIONS), np));
                }
                Some(_) => {
                    let open: Vec<usize> = (0..c.pps.len())
                        .filter(|&i| c.pps[i].1.adjs.len() < 2)
                        .collect();
                    let i = open[rng.gen_range(0..open.len())];
                    c.pps[i].1.adjs.push(pick(rng, &lex.adjectives));
                }
                None => return None,
            }
        }
        Some(c)
    }
}

fn corpus_sentence<R: Rng>(rng: &mut R, lex: &Lexicon) -> Vec<&'static str> {
    loop {
        let words = Clause::sample(rng, lex).words();
        if (MIN_SENTENCE_LEN..=MAX_SENTENCE_LEN).contains(&words.len()) {
            return words;
        }
    }
}

/// `n` generated sentences, one per line with a trailing newline.
pub fn synth_corpus(n: usize, grammar_seed: u64) -> String {
    let lex = Lexicon::new();
    let mut rng = ChaCha8Rng::seed_from_u64(grammar_seed);
    let mut out = String::new();
    for _ in 0..n {
        out.push_str(&corpus_sentence(&mut rng, &lex).join(" "));
        out.push('\n');
    }
    out
}

fn corrupt<R: Rng>(rng: &mut R, words: &[&'static str], rate: f64) -> Vec<&'static str> {
    let k = ((rate * words.len() as f64).round() as usize).clamp(1, words.len() - 1);
    let picked: Vec<usize> = rand::seq::index::sample(rng, words.len(), k).into_vec();
    let mut out = Vec::with_capacity(words.len());
    for (i, &w) in words.iter().enumerate() {
        if !picked.contains(&i) {
            out.push(w);
            continue;
        }
        match lexicon::synonym(w) {
            Some(s) if rng.gen_bool(0.5) => out.push(s),
            _ => {}
        }
    }
    out
}

/// Paraphrase pairs with gold score `5 (1 - r)` for corruption rate `r`.
///
/// Rates cycle over [`CORRUPTION_RATES`] so every level is equally
/// represented; the pair order is then shuffled.
pub fn synth_sts(n: usize, seed: u64) -> Vec<StsPair> {
    let lex = Lexicon::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<StsPair> = (0..n)
        .map(|i| {
            let rate = CORRUPTION_RATES[i % CORRUPTION_RATES.len()];
            let base = corpus_sentence(&mut rng, &lex);
            let other = if rate == 0.0 {
                base.clone()
            } else if rate >= 1.0 {
                corpus_sentence(&mut rng, &lex)
            } else {
                corrupt(&mut rng, &base, rate)
            };
            StsPair {
                sentence_a: base.join(" "),
                sentence_b: other.join(" "),
                gold_score: 5.0 * (1.0 - rate),
            }
        })
        .collect();
    pairs.shuffle(&mut rng);
    pairs
}

/// Probing task families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProbeKind {
    SentLen,
    TreeDepth,
    CoordInv,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [
        ProbeKind::SentLen,
        ProbeKind::TreeDepth,
        ProbeKind::CoordInv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::SentLen => "sentlen",
            ProbeKind::TreeDepth => "treedepth",
            ProbeKind::CoordInv => "coordinv",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            ProbeKind::SentLen => 4,
            ProbeKind::TreeDepth => 3,
            ProbeKind::CoordInv => 2,
        }
    }
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Input(format!(
                    "unknown probing task '{s}' (expected sentlen, treedepth or coordinv)"
                ))
            })
    }
}

impl std::fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Length bucket of a `len`-token sentence: `[4-7]`, `[8-11]`, `[12-15]`, `[16-20]`.
pub fn sentlen_bucket(len: usize) -> usize {
    match len {
        0..=7 => 0,
        8..=11 => 1,
        12..=15 => 2,
        _ => 3,
    }
}

const SENTLEN_RANGES: [(usize, usize); 4] = [(4, 7), (8, 11), (12, 15), (16, 20)];

/// Center-embedded relative clauses: depth 1 has none, depth 3 has two.
fn nested_sentence<R: Rng>(rng: &mut R, lex: &Lexicon, depth: usize) -> Vec<&'static str> {
    let np = |rng: &mut R| NounPhrase::sample(rng, lex, 1);
    let subjects: Vec<NounPhrase> = (0..depth).map(|_| np(rng)).collect();
    let verbs: Vec<&'static str> = (0..depth).map(|_| pick(rng, &lex.transitive)).collect();
    let mut out = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        if i > 0 {
            out.push(pick(rng, lexicon::RELATIVES));
        }
        s.render(&mut out);
    }
    for v in verbs.iter().rev() {
        out.push(v);
    }
    np(rng).render(&mut out);
    if rng.gen_bool(0.3) {
        out.push(pick(rng, &lex.adverbs));
    }
    out
}

/// Labeled probing sentences with balanced classes.
///
/// Labels: `sentlen` gives the length bucket (0-3), `treedepth` the nesting
/// depth (1-3), `coordinv` 1 when the two clauses appear in swapped order.
pub fn probing_datasets(kind: ProbeKind, n: usize, seed: u64) -> Vec<(String, usize)> {
    let lex = Lexicon::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = kind.num_classes();
    let mut rows: Vec<(String, usize)> = (0..n)
        .map(|i| {
            let class = i % classes;
            match kind {
                ProbeKind::SentLen => {
                    let (lo, hi) = SENTLEN_RANGES[class];
                    let len = rng.gen_range(lo..=hi);
                    (
                        Clause::with_length(&mut rng, &lex, len).words().join(" "),
                        class,
                    )
                }
                ProbeKind::TreeDepth => {
                    let depth = class + 1;
                    (nested_sentence(&mut rng, &lex, depth).join(" "), depth)
                }
                ProbeKind::CoordInv => {
                    let first = Clause::transitive(&mut rng, &lex).words();
                    let mut second = Clause::intransitive(&mut rng, &lex);
                    second.adverb = Some(pick(&mut rng, &lex.adverbs));
                    let second = second.words();
                    let conj = pick(&mut rng, lexicon::CONJUNCTIONS);
                    let swapped = class == 1;
                    let (a, b) = if swapped {
                        (&second, &first)
                    } else {
                        (&first, &second)
                    };
                    let text = format!("{} {conj} {}", a.join(" "), b.join(" "));
                    (text, class)
                }
            }
        })
        .collect();
    rows.shuffle(&mut rng);
    rows
}
