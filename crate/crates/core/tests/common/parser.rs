//! Hand-labeled sentence fixture scoring for the report parser.

use petgrid_core::report::{ReportParser, Sentence};
use serde::Deserialize;

#[derive(Deserialize)]
struct Labeled {
    text: String,
    candidate: bool,
    pairs: Vec<(f64, u32)>,
    prior: bool,
}

pub struct FixtureScores {
    pub filter_agreement: usize,
    pub total: usize,
    pub extractable: usize,
    pub extraction_exact: usize,
    pub prior_tp: usize,
    pub prior_fp: usize,
    pub prior_fn: usize,
}

impl FixtureScores {
    pub fn prior_precision(&self) -> f64 {
        self.prior_tp as f64 / (self.prior_tp + self.prior_fp) as f64
    }

    pub fn prior_recall(&self) -> f64 {
        self.prior_tp as f64 / (self.prior_tp + self.prior_fn) as f64
    }
}

pub fn score_fixture() -> FixtureScores {
    let parser = ReportParser::default();
    let text = include_str!("../fixtures/parser_sentences.jsonl");
    let rows: Vec<Labeled> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut s = FixtureScores {
        filter_agreement: 0,
        total: rows.len(),
        extractable: 0,
        extraction_exact: 0,
        prior_tp: 0,
        prior_fp: 0,
        prior_fn: 0,
    };
    for (i, row) in rows.iter().enumerate() {
        let sentence = Sentence::new(&row.text, "fixture", i).unwrap();
        let cand = parser.filter_candidate(&sentence);
        if cand == row.candidate {
            s.filter_agreement += 1;
        } else {
            eprintln!("filter disagreement: {:?} (label {})", row.text, row.candidate);
        }
        if row.candidate && cand {
            s.extractable += 1;
            let got: Vec<(f64, u32)> = parser
                .extract_measurements(&sentence)
                .map(|ms| ms.iter().map(|m| (m.suv_max, m.slice_number)).collect())
                .unwrap_or_default();
            if got == row.pairs {
                s.extraction_exact += 1;
            } else {
                eprintln!("extraction mismatch: {:?} got {got:?}", row.text);
            }
        }
        match (parser.flag_prior_reference(&sentence), row.prior) {
            (true, true) => s.prior_tp += 1,
            (true, false) => {
                s.prior_fp += 1;
                eprintln!("prior false positive: {:?}", row.text);
            }
            (false, true) => {
                s.prior_fn += 1;
                eprintln!("prior false negative: {:?}", row.text);
            }
            _ => {}
        }
    }
    s
}

