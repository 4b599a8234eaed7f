//! Corpus BLEU-4 and CIDEr over token lists.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const BLEU_EPSILON: f64 = 1e-9;
pub const CIDER_SCALE: f64 = 10.0;

/// Multiset of the order-`n` n-grams of `tokens`.
pub fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.iter().map(AsRef::as_ref).collect())
            .or_insert(0) += 1;
    }
    out
}

/// Corpus-level BLEU-4 with one reference per candidate.
///
/// Clipped n-gram matches and candidate n-gram totals are summed over the
/// corpus for n = 1..4; the score is the brevity penalty times the geometric
/// mean of the four precisions. A zero precision is replaced by
/// [`BLEU_EPSILON`]. An order with no n-grams on either side (all sentences
/// shorter than n) is vacuously matched and contributes precision 1.
pub fn bleu4<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::contract("bleu4 needs at least one candidate"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let mut matches = 0usize;
        let mut total = 0usize;
        let mut ref_total = 0usize;
        for (c, r) in candidates.iter().zip(references) {
            let cc = ngram_counts(c, n);
            let rc = ngram_counts(r, n);
            total += cc.values().sum::<usize>();
            ref_total += rc.values().sum::<usize>();
            matches += cc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
        let precision = if total == 0 && ref_total == 0 {
            1.0
        } else if matches == 0 {
            BLEU_EPSILON
        } else {
            matches as f64 / total as f64
        };
        log_sum += precision.ln();
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * (log_sum / 4.0).exp())
}

/// Plain CIDEr (no length penalty, no clipping), scaled by [`CIDER_SCALE`].
///
/// For each n in 1..4, every sentence becomes a vector over n-grams with
/// weight `tf(g) · ln(N / df(g))`, where `tf` is the count divided by the
/// sentence's n-gram total, `N` the number of candidates, and `df(g)` the
/// number of reference sets containing `g` (at least 1). A candidate's order-n
/// score is its mean cosine similarity to its references; the corpus score is
/// the mean over candidates of the mean over orders, times the scale.
pub fn cider<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() || references.iter().any(Vec::is_empty) {
        return Err(Error::contract(
            "cider needs a non-empty reference set per candidate",
        ));
    }
    let n_docs = candidates.len() as f64;
    let mut totals = vec![0.0; candidates.len()];
    for n in 1..=4 {
        let ref_counts: Vec<Vec<HashMap<Vec<&str>, usize>>> = references
            .iter()
            .map(|refs| refs.iter().map(|r| ngram_counts(r, n)).collect())
            .collect();
        let mut df: HashMap<Vec<&str>, usize> = HashMap::new();
        for refs in &ref_counts {
            let mut seen: Vec<&Vec<&str>> = refs.iter().flat_map(|c| c.keys()).collect();
            seen.sort();
            seen.dedup();
            for g in seen {
                *df.entry(g.clone()).or_insert(0) += 1;
            }
        }
        for (i, c) in candidates.iter().enumerate() {
            let cv = tf_idf(&ngram_counts(c, n), &df, n_docs);
            let sims: f64 = ref_counts[i]
                .iter()
                .map(|rc| cosine(&cv, &tf_idf(rc, &df, n_docs)))
                .sum();
            totals[i] += sims / ref_counts[i].len() as f64 / 4.0;
        }
    }
    Ok(CIDER_SCALE * totals.iter().sum::<f64>() / n_docs)
}

fn tf_idf<'a>(
    counts: &HashMap<Vec<&'a str>, usize>,
    df: &HashMap<Vec<&str>, usize>,
    n_docs: f64,
) -> HashMap<Vec<&'a str>, f64> {
    let sum: usize = counts.values().sum();
    counts
        .iter()
        .map(|(g, &k)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g.clone(), k as f64 / sum as f64 * (n_docs / d).ln())
        })
        .collect()
}

fn cosine(a: &HashMap<Vec<&str>, f64>, b: &HashMap<Vec<&str>, f64>) -> f64 {
    let norm = |v: &HashMap<Vec<&str>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .iter()
        .map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0))
        .sum();
    dot / (na * nb)
}

/// Mean and population standard deviation of output lengths.
pub fn length_stats(lengths: &[usize]) -> (f64, f64) {
    if lengths.is_empty() {
        return (0.0, 0.0);
    }
    let n = lengths.len() as f64;
    let mean = lengths.iter().sum::<usize>() as f64 / n;
    let var = lengths
        .iter()
        .map(|&l| (l as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_identity_and_short_identity() {
        let c = vec![toks("a man holding a racket on the court")];
        assert!((bleu4(&c, &c).unwrap() - 1.0).abs() < 1e-15);
        let short = vec![toks("dog")];
        assert_eq!(bleu4(&short, &short).unwrap(), 1.0);
    }

    #[test]
    fn bleu_rejects_bad_input() {
        let empty: Vec<Vec<&str>> = vec![];
        assert!(bleu4(&empty, &empty).is_err());
        assert!(bleu4(&[toks("a")], &[toks("a"), toks("b")]).is_err());
    }

    #[test]
    fn bleu_disjoint_is_tiny() {
        let score = bleu4(&[toks("a b c d e")], &[toks("v w x y z")]).unwrap();
        assert!(score <= 1e-8, "{score}");
    }

    #[test]
    fn cider_disjoint_is_zero_and_errors() {
        let refs = vec![vec![toks("the cat sat")], vec![toks("a dog ran")]];
        let score = cider(&[toks("blue sky"), toks("green sea")], &refs).unwrap();
        assert_eq!(score, 0.0);
        assert!(cider(&[toks("x")], &[vec![]]).is_err());
    }

    #[test]
    fn length_stats_of_equal_lengths() {
        assert_eq!(length_stats(&[5, 5, 5]), (5.0, 0.0));
    }
}
