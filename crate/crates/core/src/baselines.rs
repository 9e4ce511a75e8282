//! Word-aggregation baselines for sentence-level norms, and sentence features
//! built by averaging word embeddings.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::model::Dimensions;

/// A handful of English function words, used when no stoplist file is given.
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "if", "of", "to", "in", "on", "at", "by", "for",
    "with", "from", "as", "is", "are", "was", "were", "be", "been", "being", "am", "it", "its",
    "this", "that", "these", "those", "i", "you", "he", "she", "we", "they", "me", "him", "her",
    "us", "them", "my", "your", "his", "our", "their", "do", "does", "did", "have", "has", "had",
    "not", "no", "so", "than", "too", "very", "can", "will", "just", "there", "then", "into",
];

/// Whitespace split, trim punctuation at both ends of each token, lowercase.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Word → per-dimension norm scores.
#[derive(Debug, Clone)]
pub struct NormLexicon {
    dimensions: Dimensions,
    scores: HashMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LexiconError {
    #[error("word `{word}` has {got} scores, expected {expected}")]
    Length {
        word: String,
        expected: usize,
        got: usize,
    },
    #[error("word `{0}` has a non-finite score")]
    NonFinite(String),
    #[error("vector for `{word}` has {got} entries, expected {expected}")]
    EmbeddingLength {
        word: String,
        expected: usize,
        got: usize,
    },
}

impl NormLexicon {
    pub fn new(
        dimensions: Dimensions,
        entries: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self, LexiconError> {
        let d = dimensions.len();
        let mut scores = HashMap::new();
        for (word, v) in entries {
            if v.len() != d {
                return Err(LexiconError::Length {
                    word,
                    expected: d,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(LexiconError::NonFinite(word));
            }
            scores.insert(word.to_lowercase(), v);
        }
        Ok(Self { dimensions, scores })
    }

    pub fn dimensions(&self) -> &Dimensions {
        &self.dimensions
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.scores.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(
        dim: usize,
        entries: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self, LexiconError> {
        let mut vectors = HashMap::new();
        for (word, v) in entries {
            if v.len() != dim {
                return Err(LexiconError::EmbeddingLength {
                    word,
                    expected: dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(LexiconError::NonFinite(word));
            }
            vectors.insert(word, v);
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }
}

#[derive(Debug, Clone, Default)]
pub struct StopList {
    words: HashSet<String>,
}

impl StopList {
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        Self {
            words: words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    pub fn english_default() -> Self {
        Self::new(DEFAULT_STOPWORDS.iter().copied())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    Mean,
    Max,
    Min,
    Sum,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [
        Aggregator::Mean,
        Aggregator::Max,
        Aggregator::Min,
        Aggregator::Sum,
    ];
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
            Aggregator::Min => "min",
            Aggregator::Sum => "sum",
        })
    }
}

impl FromStr for Aggregator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregator::Mean),
            "max" => Ok(Aggregator::Max),
            "min" => Ok(Aggregator::Min),
            "sum" => Ok(Aggregator::Sum),
            other => Err(format!("unknown aggregator `{other}` (expected mean|max|min|sum)")),
        }
    }
}

/// Tokens that survive stoplist filtering and have a lexicon entry.
pub fn content_words<'a, S: AsRef<str>>(
    sentence: &'a [S],
    lexicon: &NormLexicon,
    stoplist: &StopList,
) -> Vec<&'a str> {
    sentence
        .iter()
        .map(AsRef::as_ref)
        .filter(|w| !stoplist.contains(w) && lexicon.get(w).is_some())
        .collect()
}

/// Aggregates word norms per dimension over the content words of `sentence`.
/// Returns `None` when no content word remains.
pub fn aggregate_norms<S: AsRef<str>>(
    sentence: &[S],
    lexicon: &NormLexicon,
    stoplist: &StopList,
    agg: Aggregator,
) -> Option<Vec<f64>> {
    let words = content_words(sentence, lexicon, stoplist);
    if words.is_empty() {
        return None;
    }
    let d = lexicon.dimensions().len();
    let rows: Vec<&[f64]> = words.iter().filter_map(|w| lexicon.get(w)).collect();
    let out = (0..d)
        .map(|dim| {
            let column = rows.iter().map(|r| r[dim]);
            match agg {
                Aggregator::Sum => column.sum(),
                Aggregator::Mean => column.sum::<f64>() / rows.len() as f64,
                Aggregator::Max => column.fold(f64::NEG_INFINITY, f64::max),
                Aggregator::Min => column.fold(f64::INFINITY, f64::min),
            }
        })
        .collect();
    Some(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceFeatures {
    pub vector: Vec<f64>,
    pub tokens_found: usize,
    /// Set when no token had an embedding and `vector` is all zeros.
    pub no_embeddings: bool,
}

/// Unweighted mean of the embeddings of in-table tokens. Stoplist filtering is
/// off unless `stoplist` is given.
pub fn sentence_features<S: AsRef<str>>(
    sentence: &[S],
    table: &EmbeddingTable,
    stoplist: Option<&StopList>,
) -> SentenceFeatures {
    let mut acc = vec![0.0; table.dim()];
    let mut found = 0usize;
    for tok in sentence.iter().map(AsRef::as_ref) {
        if stoplist.is_some_and(|s| s.contains(tok)) {
            continue;
        }
        if let Some(v) = table.get(tok) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
            found += 1;
        }
    }
    if found > 0 {
        acc.iter_mut().for_each(|a| *a /= found as f64);
    }
    SentenceFeatures {
        vector: acc,
        tokens_found: found,
        no_embeddings: found == 0,
    }
}
