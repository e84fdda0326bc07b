//! Corpus-level text generation metrics and evaluation reports.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

mod evaluate;
mod report;

pub use evaluate::{evaluate, score_corpus, EvalOutput};
pub use report::EvalReport;

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;

fn check_aligned<T>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU with uniform weights up to `max_n`, no smoothing.
pub fn bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<f64> {
    check_aligned(hyps, refs)?;
    if hyps.is_empty() {
        return Err(Error::Input("BLEU needs a non-empty corpus".into()));
    }
    if !(1..=4).contains(&max_n) {
        return Err(Error::Input(format!("BLEU order {max_n} outside 1..=4")));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, k) in &hc {
                matched[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_mean = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_mean.exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure of one pair.
pub fn rouge_l_pair<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let l = lcs_len(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// Mean pairwise ROUGE-L.
pub fn rouge_l<T: Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_aligned(hyps, refs)?;
    if hyps.is_empty() {
        return Err(Error::Input("ROUGE-L needs a non-empty corpus".into()));
    }
    let sum: f64 = hyps.iter().zip(refs).map(|(h, r)| rouge_l_pair(h, r)).sum();
    Ok(sum / hyps.len() as f64)
}

/// NIST with information weights estimated from the reference corpus.
pub fn nist<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<f64> {
    check_aligned(hyps, refs)?;
    if hyps.is_empty() {
        return Err(Error::Input("NIST needs a non-empty corpus".into()));
    }
    if max_n == 0 {
        return Err(Error::Input("NIST order must be positive".into()));
    }
    // corpus-wide reference n-gram counts, orders 1..=max_n
    let mut ref_counts: Vec<HashMap<&[T], usize>> = vec![HashMap::new(); max_n + 1];
    let mut ref_words = 0usize;
    for rf in refs {
        ref_words += rf.len();
        for (n, counts) in ref_counts.iter_mut().enumerate().skip(1) {
            for (g, k) in ngram_counts(rf, n) {
                *counts.entry(g).or_insert(0) += k;
            }
        }
    }
    let info = |g: &[T]| -> f64 {
        let n = g.len();
        let count = ref_counts[n].get(g).copied().unwrap_or(0);
        let prefix = if n == 1 {
            ref_words
        } else {
            ref_counts[n - 1].get(&g[..n - 1]).copied().unwrap_or(0)
        };
        if count == 0 || prefix == 0 {
            0.0
        } else {
            (prefix as f64 / count as f64).log2()
        }
    };

    let mut weighted = vec![0.0f64; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            total[n - 1] += h.len().saturating_sub(n - 1);
            // walk grams in order of first occurrence so the sum is reproducible
            let mut seen: HashMap<&[T], ()> = HashMap::new();
            if h.len() >= n {
                for g in h.windows(n) {
                    if seen.insert(g, ()).is_some() {
                        continue;
                    }
                    let m = hc[g].min(rc.get(g).copied().unwrap_or(0));
                    if m > 0 {
                        weighted[n - 1] += m as f64 * info(g);
                    }
                }
            }
        }
    }
    let precision: f64 = weighted
        .iter()
        .zip(&total)
        .filter(|(_, &t)| t > 0)
        .map(|(w, &t)| w / t as f64)
        .sum();
    Ok(precision * nist_brevity_penalty(c, r))
}

/// `exp(beta * ln^2(min(c/r, 1)))` with `beta` chosen so that a 2/3 length ratio gives 0.5.
pub fn nist_brevity_penalty(c: usize, r: usize) -> f64 {
    if r == 0 || c >= r {
        return 1.0;
    }
    if c == 0 {
        return 0.0;
    }
    let beta = 0.5f64.ln() / 1.5f64.ln().powi(2);
    let ratio = c as f64 / r as f64;
    (beta * ratio.ln().powi(2)).exp()
}
