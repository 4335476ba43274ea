use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    bleu4, bleu4_pair, cider_pairs, meteor_pair, rouge_l_pair, spearman, tokenize, CiderOptions, EvalPair,
    MetricsError,
};

pub const SCHEMA_VERSION: u32 = 1;

/// One line of a predictions or references JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalOptions {
    pub cider: CiderOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub id: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub human_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub n_pairs: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
}

/// `report.json`. Pairs are sorted by id. `spearman` maps metric name to
/// rho over the pairs that carry a human score; metrics whose rank
/// correlation is undefined are listed in `spearman_undefined` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub corpus: CorpusScores,
    pub pairs: Vec<PairScores>,
    pub spearman: BTreeMap<String, f64>,
    pub spearman_undefined: BTreeMap<String, String>,
}

pub fn read_texts(path: &Path) -> Result<Vec<TextRecord>, MetricsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MetricsError::Format {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// `id,score` CSV; a header row is skipped when its score column is not numeric.
pub fn read_human_scores(path: &Path) -> Result<BTreeMap<String, f64>, MetricsError> {
    let fmt = |line: usize, msg: String| MetricsError::Format {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| fmt(0, e.to_string()))?;
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| fmt(i + 1, e.to_string()))?;
        if rec.len() != 2 {
            return Err(fmt(i + 1, format!("expected 2 columns, got {}", rec.len())));
        }
        match rec[1].parse::<f64>() {
            Ok(v) if v.is_finite() => {
                out.insert(rec[0].to_string(), v);
            }
            Err(_) if i == 0 => {}
            _ => return Err(fmt(i + 1, format!("bad score {:?}", &rec[1]))),
        }
    }
    Ok(out)
}

/// Builds pairs (references grouped by id) and scores them.
pub fn evaluate(
    preds: &[TextRecord],
    refs: &[TextRecord],
    human: &BTreeMap<String, f64>,
    opts: &EvalOptions,
) -> Result<EvalReport, MetricsError> {
    let mut by_id: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    for r in refs {
        by_id.entry(&r.id).or_default().push(tokenize(&r.text));
    }
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(preds.len());
    for p in preds {
        if !seen.insert(p.id.as_str()) {
            return Err(MetricsError::DuplicateId(p.id.clone()));
        }
        let references = by_id.get(p.id.as_str()).ok_or_else(|| MetricsError::MissingReference(p.id.clone()))?;
        pairs.push(EvalPair {
            id: p.id.clone(),
            candidate: tokenize(&p.text),
            references: references.clone(),
            human_score: human.get(&p.id).copied(),
        });
    }
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    score_pairs(&pairs, opts)
}

pub fn score_pairs(pairs: &[EvalPair], opts: &EvalOptions) -> Result<EvalReport, MetricsError> {
    let bleu_corpus = bleu4(pairs)?;
    let cider = cider_pairs(pairs, &opts.cider)?;
    let scored: Vec<PairScores> = pairs
        .par_iter()
        .zip(cider.par_iter())
        .map(|(p, &c)| PairScores {
            id: p.id.clone(),
            bleu4: bleu4_pair(p),
            rouge_l: rouge_l_pair(p),
            meteor: meteor_pair(p),
            cider: c,
            human_score: p.human_score,
        })
        .collect();
    let n = scored.len() as f64;
    let avg = |f: fn(&PairScores) -> f64| scored.iter().map(f).sum::<f64>() / n;
    let corpus = CorpusScores {
        n_pairs: scored.len(),
        bleu4: bleu_corpus,
        rouge_l: avg(|s| s.rouge_l),
        meteor: avg(|s| s.meteor),
        cider: avg(|s| s.cider),
    };

    let mut spearman_map = BTreeMap::new();
    let mut undefined = BTreeMap::new();
    let rated: Vec<&PairScores> = scored.iter().filter(|s| s.human_score.is_some()).collect();
    if !rated.is_empty() {
        let h: Vec<f64> = rated.iter().map(|s| s.human_score.expect("filtered")).collect();
        let metrics: [(&str, fn(&PairScores) -> f64); 4] = [
            ("bleu4", |s| s.bleu4),
            ("rouge_l", |s| s.rouge_l),
            ("meteor", |s| s.meteor),
            ("cider", |s| s.cider),
        ];
        for (name, f) in metrics {
            let x: Vec<f64> = rated.iter().map(|s| f(s)).collect();
            match spearman(&x, &h) {
                Ok(r) => {
                    spearman_map.insert(name.to_string(), r);
                }
                Err(e) => {
                    undefined.insert(name.to_string(), e.to_string());
                }
            }
        }
    }
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        corpus,
        pairs: scored,
        spearman: spearman_map,
        spearman_undefined: undefined,
    })
}
