use std::collections::{HashMap, HashSet};

use super::ngram::ngram_counts;
use super::{check_corpus, mean, EvalPair, MetricsError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiderOptions {
    /// Multiply each reference similarity by `exp(-(lc - lr)^2 / (2 sigma^2))`.
    pub length_penalty: bool,
    pub sigma: f64,
}

impl Default for CiderOptions {
    fn default() -> Self {
        Self {
            length_penalty: false,
            sigma: 6.0,
        }
    }
}

type Vector<'a> = HashMap<&'a [String], f64>;

struct Idf<'a> {
    n_docs: f64,
    df: [HashMap<&'a [String], usize>; 4],
}

impl<'a> Idf<'a> {
    /// Document frequency counts a pair once if any of its references holds the n-gram.
    fn build(pairs: &'a [EvalPair]) -> Self {
        let mut df: [HashMap<&[String], usize>; 4] = Default::default();
        for p in pairs {
            for n in 1..=4 {
                let seen: HashSet<&[String]> = p.references.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
                for g in seen {
                    *df[n - 1].entry(g).or_insert(0) += 1;
                }
            }
        }
        Self {
            n_docs: pairs.len() as f64,
            df,
        }
    }

    /// Smoothed `ln((1 + N) / (1 + df)) + 1`.
    fn weight(&self, n: usize, g: &[String]) -> f64 {
        let df = self.df[n - 1].get(g).copied().unwrap_or(0) as f64;
        ((1.0 + self.n_docs) / (1.0 + df)).ln() + 1.0
    }

    fn vector<'t>(&self, tokens: &'t [String], n: usize) -> Vector<'t> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, c)| (g, c as f64 * self.weight(n, g)))
            .collect()
    }
}

fn cosine(a: &Vector, b: &Vector) -> f64 {
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

fn pair_score(idf: &Idf, p: &EvalPair, opts: &CiderOptions) -> f64 {
    let per_n = (1..=4).map(|n| {
        let c = idf.vector(&p.candidate, n);
        mean(p.references.iter().map(|r| {
            let sim = cosine(&c, &idf.vector(r, n));
            if opts.length_penalty {
                let d = p.candidate.len() as f64 - r.len() as f64;
                sim * (-(d * d) / (2.0 * opts.sigma * opts.sigma)).exp()
            } else {
                sim
            }
        }))
    });
    mean(per_n)
}

/// Per-pair CIDEr: TF-IDF n-gram vectors (n = 1..4, IDF from the corpus
/// references), cosine against each reference averaged over references,
/// then averaged over n. Scores lie in [0, 1]; no x10 scaling.
pub fn cider_pairs(pairs: &[EvalPair], opts: &CiderOptions) -> Result<Vec<f64>, MetricsError> {
    check_corpus(pairs)?;
    let idf = Idf::build(pairs);
    Ok(pairs.iter().map(|p| pair_score(&idf, p, opts)).collect())
}

/// Mean of [`cider_pairs`].
pub fn cider(pairs: &[EvalPair], opts: &CiderOptions) -> Result<f64, MetricsError> {
    Ok(mean(cider_pairs(pairs, opts)?.into_iter()))
}
