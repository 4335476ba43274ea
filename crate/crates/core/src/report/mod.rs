//! Rule-based extraction of lesion-level records from PET report text.
//!
//! A sentence is a candidate when it mentions both an SUVmax value and a
//! slice number. Each SUV mention is paired with the nearest unused slice
//! mention that follows it (before the next SUV mention), falling back to the
//! nearest unused preceding one. Anatomy comes from a longest-match lexicon.

mod lexicon;
mod patterns;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lexicon::{Anatomy, Lexicon, UNKNOWN};
pub use patterns::{CompiledPatterns, PatternInventory};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid pattern inventory: {0}")]
    Patterns(String),
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
    #[error("no (SUV, slice) pair could be formed")]
    NoPairFound,
    #[error("sentence is empty after whitespace normalization")]
    EmptySentence,
}

/// One report sentence with whitespace collapsed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    text: String,
    pub exam_id: String,
    pub index: usize,
}

impl Sentence {
    pub fn new(text: &str, exam_id: impl Into<String>, index: usize) -> Result<Self, ParseError> {
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if text.is_empty() {
            return Err(ParseError::EmptySentence);
        }
        Ok(Self {
            text,
            exam_id: exam_id.into(),
            index,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Splits raw report text into sentences. Lines are split first; within a
/// line a break happens after `.`, `!` or `?` followed by whitespace and an
/// uppercase letter, so decimals like `8.4` never split.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let chars: Vec<(usize, char)> = line.char_indices().collect();
        let mut start = 0;
        for (k, &(pos, c)) in chars.iter().enumerate() {
            if !matches!(c, '.' | '!' | '?') {
                continue;
            }
            let mut j = k + 1;
            let mut saw_space = false;
            while j < chars.len() && chars[j].1.is_whitespace() {
                saw_space = true;
                j += 1;
            }
            if saw_space && j < chars.len() && chars[j].1.is_uppercase() {
                out.push(line[start..pos + c.len_utf8()].to_string());
                start = chars[j].0;
            }
        }
        out.push(line[start..].to_string());
    }
    out.into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// An extracted `(SUVmax, slice)` pair with byte spans into the sentence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub suv_max: f64,
    /// 1-based, as written in the report.
    pub slice_number: u32,
    pub span: (usize, usize),
    pub suv_span: (usize, usize),
    pub slice_span: (usize, usize),
}

/// Structured lesion finding, one JSONL line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionRecord {
    pub region: String,
    pub organ: String,
    pub anatomic_subsite: String,
    pub report: String,
    pub suv_max: f64,
    pub slice_number: u32,
    pub exam_id: String,
    /// Index of the source sentence within its report.
    pub sentence_index: usize,
    pub is_prior_reference: bool,
}

impl LesionRecord {
    /// 0-based axial index of the reported slice.
    pub fn axial_index(&self) -> usize {
        self.slice_number as usize - 1
    }
}

#[derive(Debug, Clone)]
pub struct ReportParser {
    patterns: CompiledPatterns,
    lexicon: Lexicon,
}

impl Default for ReportParser {
    fn default() -> Self {
        Self::new(&PatternInventory::builtin(), Lexicon::builtin()).expect("bundled inventory compiles")
    }
}

impl ReportParser {
    pub fn new(inventory: &PatternInventory, lexicon: Lexicon) -> Result<Self, ParseError> {
        Ok(Self {
            patterns: CompiledPatterns::compile(inventory)?,
            lexicon,
        })
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn pattern_version(&self) -> u32 {
        self.patterns.version()
    }

    pub fn filter_candidate(&self, s: &Sentence) -> bool {
        !self.valid_suvs(s.text()).is_empty() && !self.valid_slices(s.text()).is_empty()
    }

    fn valid_suvs(&self, text: &str) -> Vec<patterns::Mention> {
        self.patterns
            .suv_mentions(text)
            .into_iter()
            .filter(|m| m.value.is_finite() && m.value > 0.0)
            .collect()
    }

    fn valid_slices(&self, text: &str) -> Vec<patterns::Mention> {
        self.patterns
            .slice_mentions(text)
            .into_iter()
            .filter(|m| m.value >= 1.0 && m.value <= u32::MAX as f64)
            .collect()
    }

    pub fn extract_measurements(&self, s: &Sentence) -> Result<Vec<Measurement>, ParseError> {
        let text = s.text();
        let suvs = self.valid_suvs(text);
        let slices: Vec<_> = self
            .valid_slices(text)
            .into_iter()
            .filter(|sl| suvs.iter().all(|u| sl.end <= u.start || sl.start >= u.end))
            .collect();
        let mut used = vec![false; slices.len()];
        let mut floor = 0usize;
        let mut out = Vec::new();
        for (k, suv) in suvs.iter().enumerate() {
            let next_suv = suvs.get(k + 1).map_or(text.len(), |n| n.start);
            let following = (0..slices.len())
                .find(|&i| !used[i] && slices[i].start >= suv.end && slices[i].start < next_suv);
            let chosen = following.or_else(|| {
                (0..slices.len())
                    .rev()
                    .find(|&i| !used[i] && slices[i].end <= suv.start && slices[i].start >= floor)
            });
            let Some(i) = chosen else { continue };
            used[i] = true;
            let sl = slices[i];
            let span = (suv.start.min(sl.start), suv.end.max(sl.end));
            floor = span.1;
            out.push(Measurement {
                suv_max: suv.value,
                slice_number: sl.value as u32,
                span,
                suv_span: (suv.start, suv.end),
                slice_span: (sl.start, sl.end),
            });
        }
        if out.is_empty() {
            return Err(ParseError::NoPairFound);
        }
        Ok(out)
    }

    pub fn flag_prior_reference(&self, s: &Sentence) -> bool {
        self.patterns.has_prior_cue(s.text())
    }

    pub fn to_record(&self, s: &Sentence, m: &Measurement) -> LesionRecord {
        let anatomy = self.lexicon.resolve(s.text());
        LesionRecord {
            region: anatomy.region,
            organ: anatomy.organ,
            anatomic_subsite: anatomy.anatomic_subsite,
            report: s.text().to_string(),
            suv_max: m.suv_max,
            slice_number: m.slice_number,
            exam_id: s.exam_id.clone(),
            sentence_index: s.index,
            is_prior_reference: self.flag_prior_reference(s),
        }
    }

    /// Records for every candidate sentence of one report, in text order.
    pub fn parse_report(&self, exam_id: &str, text: &str) -> Vec<LesionRecord> {
        let mut records = Vec::new();
        for (index, raw) in split_sentences(text).iter().enumerate() {
            let Ok(sentence) = Sentence::new(raw, exam_id, index) else { continue };
            if !self.filter_candidate(&sentence) {
                continue;
            }
            match self.extract_measurements(&sentence) {
                Ok(ms) => records.extend(ms.iter().map(|m| self.to_record(&sentence, m))),
                Err(e) => log::debug!("{exam_id}#{index}: {e}"),
            }
        }
        records
    }

    /// Parses every `*.txt` file in `dir` (sorted by name); the file stem is
    /// the exam id.
    pub fn parse_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<LesionRecord>, ParseError> {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        files.sort();
        let mut records = Vec::new();
        for path in files {
            let exam_id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            records.extend(self.parse_report(&exam_id, &fs::read_to_string(&path)?));
        }
        Ok(records)
    }
}
