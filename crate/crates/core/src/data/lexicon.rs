//! Word lists for the templated generators, with synonym pairs used by the
//! paraphrase corruption.

pub(crate) const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every", "some"];

/// Synonym pairs; both members appear in generated text.
pub(crate) const NOUN_PAIRS: &[(&str, &str)] = &[
    ("dog", "hound"),
    ("man", "gentleman"),
    ("woman", "lady"),
    ("child", "kid"),
    ("teacher", "instructor"),
    ("doctor", "physician"),
    ("car", "automobile"),
    ("house", "home"),
    ("road", "street"),
    ("boat", "ship"),
    ("stone", "rock"),
    ("river", "stream"),
    ("city", "town"),
    ("garden", "yard"),
    ("book", "novel"),
    ("song", "tune"),
    ("hat", "cap"),
    ("cup", "mug"),
    ("box", "crate"),
    ("field", "meadow"),
    ("mountain", "hill"),
    ("friend", "companion"),
    ("student", "pupil"),
    ("king", "monarch"),
];

pub(crate) const NOUNS: &[&str] = &[
    "cat", "bird", "horse", "farmer", "girl", "boy", "soldier", "sailor", "artist", "baker",
    "pilot", "singer", "writer", "ball", "tree", "letter", "apple", "bread", "window", "door",
    "table", "chair", "flower", "lamp",
];

pub(crate) const TRANSITIVE_PAIRS: &[(&str, &str)] = &[
    ("saw", "noticed"),
    ("liked", "enjoyed"),
    ("found", "discovered"),
    ("took", "grabbed"),
    ("helped", "assisted"),
    ("watched", "observed"),
    ("built", "constructed"),
    ("bought", "purchased"),
    ("carried", "hauled"),
    ("chased", "pursued"),
    ("pushed", "shoved"),
    ("held", "gripped"),
    ("cleaned", "washed"),
    ("fixed", "repaired"),
    ("loved", "adored"),
    ("followed", "trailed"),
];

pub(crate) const TRANSITIVE: &[&str] = &[
    "painted", "visited", "called", "opened", "dropped", "knew", "met", "sold",
];

pub(crate) const INTRANSITIVE_PAIRS: &[(&str, &str)] = &[
    ("ran", "sprinted"),
    ("slept", "dozed"),
    ("laughed", "giggled"),
    ("walked", "strolled"),
    ("jumped", "leaped"),
    ("cried", "wept"),
    ("smiled", "grinned"),
    ("waited", "lingered"),
];

pub(crate) const INTRANSITIVE: &[&str] =
    &["sang", "danced", "arrived", "fell", "rested", "shouted"];

pub(crate) const ADJECTIVE_PAIRS: &[(&str, &str)] = &[
    ("big", "large"),
    ("small", "little"),
    ("happy", "glad"),
    ("quick", "fast"),
    ("old", "ancient"),
    ("bright", "shiny"),
    ("quiet", "silent"),
    ("angry", "furious"),
    ("tired", "weary"),
    ("strong", "powerful"),
    ("pretty", "lovely"),
    ("cold", "chilly"),
    ("clever", "smart"),
    ("brave", "bold"),
    ("rich", "wealthy"),
];

pub(crate) const ADJECTIVES: &[&str] = &[
    "red", "blue", "green", "yellow", "young", "tall", "dark", "gentle", "wooden", "noisy",
];

pub(crate) const ADVERB_PAIRS: &[(&str, &str)] = &[
    ("quickly", "rapidly"),
    ("slowly", "gradually"),
    ("quietly", "silently"),
    ("happily", "cheerfully"),
    ("carefully", "cautiously"),
    ("often", "frequently"),
    ("suddenly", "abruptly"),
];

pub(crate) const ADVERBS: &[&str] = &["yesterday", "today", "again", "tonight"];

pub(crate) const PREPOSITIONS: &[&str] = &[
    "near", "behind", "under", "over", "beside", "inside", "across", "along", "beyond", "with",
];

pub(crate) const CONJUNCTIONS: &[&str] = &["and", "but"];

pub(crate) const RELATIVES: &[&str] = &["that", "who"];

/// Flattened word class: every member of every pair plus the singletons.
pub(crate) fn class_words(
    pairs: &[(&'static str, &'static str)],
    singles: &[&'static str],
) -> Vec<&'static str> {
    pairs
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .chain(singles.iter().copied())
        .collect()
}

/// Synonym of `word`, if it belongs to a pair.
pub(crate) fn synonym(word: &str) -> Option<&'static str> {
    [
        NOUN_PAIRS,
        TRANSITIVE_PAIRS,
        INTRANSITIVE_PAIRS,
        ADJECTIVE_PAIRS,
        ADVERB_PAIRS,
    ]
    .iter()
    .flat_map(|pairs| pairs.iter())
    .find_map(|&(a, b)| {
        if a == word {
            Some(b)
        } else if b == word {
            Some(a)
        } else {
            None
        }
    })
}
