//! Anatomy lexicon: term -> (region, organ, anatomic subsite).

use std::path::Path;

use aho_corasick::{AhoCorasick, AhoCorasickBuilder, MatchKind};

use super::ParseError;

const DEFAULT_LEXICON: &str = include_str!("../../data/anatomy_lexicon.tsv");

pub const UNKNOWN: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anatomy {
    pub region: String,
    pub organ: String,
    pub anatomic_subsite: String,
}

impl Anatomy {
    pub fn unknown() -> Self {
        Self {
            region: UNKNOWN.into(),
            organ: UNKNOWN.into(),
            anatomic_subsite: UNKNOWN.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    terms: Vec<String>,
    entries: Vec<Anatomy>,
    matcher: AhoCorasick,
}

impl Lexicon {
    pub fn builtin() -> Self {
        Self::from_tsv(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ParseError> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    /// Four tab-separated columns per line; `#` starts a comment line.
    pub fn from_tsv(text: &str) -> Result<Self, ParseError> {
        let mut terms = Vec::new();
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            if cols.len() != 4 || cols.iter().any(|c| c.is_empty()) {
                return Err(ParseError::Lexicon(format!("line {}: expected 4 nonempty columns", n + 1)));
            }
            terms.push(cols[0].to_ascii_lowercase());
            entries.push(Anatomy {
                region: cols[1].into(),
                organ: cols[2].into(),
                anatomic_subsite: cols[3].into(),
            });
        }
        if terms.is_empty() {
            return Err(ParseError::Lexicon("no entries".into()));
        }
        let matcher = AhoCorasickBuilder::new()
            .ascii_case_insensitive(true)
            .match_kind(MatchKind::Standard)
            .build(&terms)
            .map_err(|e| ParseError::Lexicon(e.to_string()))?;
        Ok(Self {
            terms,
            entries,
            matcher,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Longest whole-word term occurring in `text`; ties go to the earliest
    /// occurrence, then to the earlier lexicon line.
    pub fn lookup(&self, text: &str) -> Option<&Anatomy> {
        let bytes = text.as_bytes();
        let is_word = |b: u8| b.is_ascii_alphanumeric();
        self.matcher
            .find_overlapping_iter(text)
            .filter(|m| {
                let before_ok = m.start() == 0 || !is_word(bytes[m.start() - 1]);
                let after_ok = m.end() == bytes.len() || !is_word(bytes[m.end()]);
                before_ok && after_ok
            })
            .min_by_key(|m| (std::cmp::Reverse(m.len()), m.start(), m.pattern().as_usize()))
            .map(|m| &self.entries[m.pattern().as_usize()])
    }

    pub fn resolve(&self, text: &str) -> Anatomy {
        self.lookup(text).cloned().unwrap_or_else(Anatomy::unknown)
    }
}
