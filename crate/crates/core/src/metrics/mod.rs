//! Caption metrics for generated findings: BLEU-4, ROUGE-L, a simplified
//! METEOR, CIDEr and Spearman correlation with human scores.
//!
//! All text goes through [`tokenize`] first.

mod cider;
mod io;
mod meteor;
mod ngram;
mod rouge;
mod spearman;

use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

pub use cider::{cider, cider_pairs, CiderOptions};
pub use io::{evaluate, score_pairs, CorpusScores, read_human_scores, read_texts, EvalOptions, EvalReport, PairScores, TextRecord};
pub use meteor::{meteor_pair, meteor_simple};
pub use ngram::{bleu4, bleu4_pair};
pub use rouge::{lcs_len, rouge_l, rouge_l_pair, ROUGE_BETA};
pub use spearman::{mid_ranks, spearman};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("pair {0} has no reference")]
    NoReference(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("rank variance is zero")]
    DegenerateVariance,
    #[error("non-finite input")]
    NonFinite,
    #[error("prediction {0} has no reference text")]
    MissingReference(String),
    #[error("duplicate prediction id {0}")]
    DuplicateId(String),
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

static TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+(?:\.\d+)+|[\p{L}\p{N}]+").expect("token regex"));

/// Lowercases and keeps runs of letters/digits; decimal numbers such as
/// `8.4` stay one token, all other punctuation is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    TOKEN.find_iter(&lower).map(|m| m.as_str().to_owned()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub candidate: Vec<String>,
    /// Usually one reference; scores take the best (ROUGE-L, METEOR) or the
    /// average (CIDEr) over several, BLEU clips against all.
    pub references: Vec<Vec<String>>,
    pub human_score: Option<f64>,
}

impl EvalPair {
    pub fn new(id: impl Into<String>, candidate: &str, reference: &str) -> Self {
        Self {
            id: id.into(),
            candidate: tokenize(candidate),
            references: vec![tokenize(reference)],
            human_score: None,
        }
    }

    pub fn with_human(mut self, score: f64) -> Self {
        self.human_score = Some(score);
        self
    }
}

fn check_corpus(pairs: &[EvalPair]) -> Result<(), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    match pairs.iter().find(|p| p.references.is_empty()) {
        Some(p) => Err(MetricsError::NoReference(p.id.clone())),
        None => Ok(()),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}
