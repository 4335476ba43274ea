use super::{check_corpus, mean, EvalPair, MetricsError};

/// Recall weight of the LCS F-measure.
pub const ROUGE_BETA: f64 = 1.2;

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f_lcs(cand: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Best LCS F-measure over the references.
pub fn rouge_l_pair(p: &EvalPair) -> f64 {
    p.references.iter().map(|r| f_lcs(&p.candidate, r)).fold(0.0, f64::max)
}

/// Mean of pair ROUGE-L scores.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    check_corpus(pairs)?;
    Ok(mean(pairs.iter().map(rouge_l_pair)))
}
