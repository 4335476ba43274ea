use std::sync::LazyLock;

use rust_stemmers::{Algorithm, Stemmer};

use super::{check_corpus, mean, EvalPair, MetricsError};

static STEMMER: LazyLock<Stemmer> = LazyLock::new(|| Stemmer::create(Algorithm::English));

/// Candidate -> reference alignment in two stages (exact form, then
/// Snowball English stem). Within a stage candidate tokens are taken left
/// to right; each takes the unmatched reference token right after the
/// previous match if it fits, otherwise the leftmost fitting one.
fn align(cand: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let cand_stems: Vec<String> = cand.iter().map(|t| STEMMER.stem(t).into_owned()).collect();
    let ref_stems: Vec<String> = reference.iter().map(|t| STEMMER.stem(t).into_owned()).collect();
    let mut ref_used = vec![false; reference.len()];
    let mut link: Vec<Option<usize>> = vec![None; cand.len()];
    for stage in 0..2 {
        let fits = |i: usize, j: usize| {
            if stage == 0 {
                cand[i] == reference[j]
            } else {
                cand_stems[i] == ref_stems[j]
            }
        };
        for i in 0..cand.len() {
            if link[i].is_some() {
                continue;
            }
            let next = i.checked_sub(1).and_then(|p| link[p]).map(|j| j + 1);
            let pick = next
                .filter(|&j| j < reference.len() && !ref_used[j] && fits(i, j))
                .or_else(|| (0..reference.len()).find(|&j| !ref_used[j] && fits(i, j)));
            if let Some(j) = pick {
                ref_used[j] = true;
                link[i] = Some(j);
            }
        }
    }
    link.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect()
}

fn chunks(alignment: &[(usize, usize)]) -> usize {
    alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
        + usize::from(!alignment.is_empty())
}

fn score(cand: &[String], reference: &[String]) -> f64 {
    let a = align(cand, reference);
    let m = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let p = m / cand.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let ch = chunks(&a);
    // a single contiguous chunk is a perfectly ordered match: no penalty
    let penalty = if ch > 1 { 0.5 * (ch as f64 / m).powi(3) } else { 0.0 };
    fmean * (1.0 - penalty)
}

/// `Fmean * (1 - 0.5 (chunks/matches)^3)` with `Fmean = 10PR / (R + 9P)`,
/// best over the references. No synonym stage.
pub fn meteor_pair(p: &EvalPair) -> f64 {
    p.references.iter().map(|r| score(&p.candidate, r)).fold(0.0, f64::max)
}

/// Mean of pair scores.
pub fn meteor_simple(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    check_corpus(pairs)?;
    Ok(mean(pairs.iter().map(meteor_pair)))
}
