use std::collections::HashMap;

use super::{check_corpus, EvalPair, MetricsError};

pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Debug, Default, Clone, Copy)]
struct BleuStats {
    matches: [usize; 4],
    totals: [usize; 4],
    cand_len: usize,
    ref_len: usize,
}

fn pair_stats(p: &EvalPair) -> BleuStats {
    let mut s = BleuStats {
        cand_len: p.candidate.len(),
        ..Default::default()
    };
    // closest reference length, shorter on ties
    s.ref_len = p
        .references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(s.cand_len), l))
        .unwrap_or(0);
    for n in 1..=4 {
        let cand = ngram_counts(&p.candidate, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &p.references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        s.matches[n - 1] = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        s.totals[n - 1] = p.candidate.len().saturating_sub(n - 1);
    }
    s
}

fn score(s: &BleuStats) -> f64 {
    if s.cand_len == 0 || s.matches[0] == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let (m, t) = (s.matches[n] as f64, s.totals[n] as f64);
        let p = if n > 0 && s.matches[n] == 0 { (m + 1.0) / (t + 1.0) } else { m / t };
        log_p += p.ln() / 4.0;
    }
    let (c, r) = (s.cand_len as f64, s.ref_len as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_p.exp()
}

/// Corpus BLEU-4: clipped n-gram counts and lengths are summed over the
/// corpus, precisions combined by an unweighted geometric mean, times the
/// brevity penalty `exp(1 - r/c)` when `c <= r`.
///
/// Smoothing: for n >= 2, a zero match count gives precision
/// `1 / (total + 1)` (add-one on numerator and denominator). A zero unigram
/// match count gives 0.
pub fn bleu4(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    check_corpus(pairs)?;
    let mut acc = BleuStats::default();
    for p in pairs {
        let s = pair_stats(p);
        for n in 0..4 {
            acc.matches[n] += s.matches[n];
            acc.totals[n] += s.totals[n];
        }
        acc.cand_len += s.cand_len;
        acc.ref_len += s.ref_len;
    }
    Ok(score(&acc))
}

/// Sentence BLEU-4 with the same smoothing.
pub fn bleu4_pair(p: &EvalPair) -> f64 {
    score(&pair_stats(p))
}
