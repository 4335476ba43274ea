//! Measurement pattern inventory. The default inventory is compiled from
//! `data/patterns.toml`; alternative inventories load from any file with the
//! same layout.

use std::path::Path;

use regex::Regex;
use serde::Deserialize;

use super::ParseError;

const DEFAULT_PATTERNS: &str = include_str!("../../data/patterns.toml");

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternInventory {
    pub version: u32,
    pub suv: Vec<String>,
    pub slice: Vec<String>,
    pub prior_cues: Vec<String>,
}

impl PatternInventory {
    pub fn builtin() -> Self {
        toml::from_str(DEFAULT_PATTERNS).expect("bundled pattern inventory is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, ParseError> {
        toml::from_str(text).map_err(|e| ParseError::Patterns(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ParseError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// A numeric mention found by one of the pattern families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Mention {
    pub start: usize,
    pub end: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct CompiledPatterns {
    version: u32,
    suv: Vec<Regex>,
    slice: Vec<Regex>,
    prior: Option<Regex>,
}

fn compile_family(name: &str, sources: &[String]) -> Result<Vec<Regex>, ParseError> {
    sources
        .iter()
        .map(|src| {
            let re = Regex::new(src).map_err(|e| ParseError::Patterns(format!("{name}: {e}")))?;
            if re.captures_len() < 2 {
                return Err(ParseError::Patterns(format!("{name} pattern has no value group: {src}")));
            }
            Ok(re)
        })
        .collect()
}

impl CompiledPatterns {
    pub fn compile(inv: &PatternInventory) -> Result<Self, ParseError> {
        let prior = if inv.prior_cues.is_empty() {
            None
        } else {
            let alts: Vec<String> = inv
                .prior_cues
                .iter()
                .map(|c| c.split_whitespace().map(regex::escape).collect::<Vec<_>>().join(r"\s+"))
                .collect();
            let src = format!(r"(?i)\b(?:{})\b", alts.join("|"));
            Some(Regex::new(&src).map_err(|e| ParseError::Patterns(e.to_string()))?)
        };
        Ok(Self {
            version: inv.version,
            suv: compile_family("suv", &inv.suv)?,
            slice: compile_family("slice", &inv.slice)?,
            prior,
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub(crate) fn suv_mentions(&self, text: &str) -> Vec<Mention> {
        find_mentions(&self.suv, text)
    }

    pub(crate) fn slice_mentions(&self, text: &str) -> Vec<Mention> {
        find_mentions(&self.slice, text)
    }

    pub(crate) fn has_prior_cue(&self, text: &str) -> bool {
        self.prior.as_ref().is_some_and(|re| re.is_match(text))
    }
}

/// All matches of a family, sorted by position with overlaps removed
/// (earliest start wins, then the longer match).
fn find_mentions(family: &[Regex], text: &str) -> Vec<Mention> {
    let mut all: Vec<Mention> = family
        .iter()
        .flat_map(|re| {
            re.captures_iter(text).filter_map(|caps| {
                let whole = caps.get(0)?;
                let value = caps.get(1)?.as_str().parse::<f64>().ok()?;
                Some(Mention {
                    start: whole.start(),
                    end: whole.end(),
                    value,
                })
            })
        })
        .collect();
    all.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));
    let mut out: Vec<Mention> = Vec::with_capacity(all.len());
    for m in all {
        if out.last().is_none_or(|last| m.start >= last.end) {
            out.push(m);
        }
    }
    out
}
