//! Corpus-level BLEU with a single reference per hypothesis.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// 0 to 100.
    pub bleu: f64,
    /// Clipped n-gram precisions for n = 1..=4; 1 for an order the
    /// hypotheses are too short to contain.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions.map(|x| x * 100.0);
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            self.hyp_len as f64 / self.ref_len.max(1) as f64,
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Standard corpus BLEU: clipped 1- to 4-gram counts pooled over the corpus,
/// geometric mean of the precisions, brevity penalty on total lengths.
pub fn corpus_bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Invalid("cannot score an empty corpus".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngrams(h, n);
            let rc = ngrams(r, n);
            total[n - 1] += h.len().saturating_sub(n - 1);
            matched[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    // An order with no hypothesis n-grams at all (every line shorter than n)
    // counts as fully precise.
    let precisions: [f64; 4] =
        std::array::from_fn(|i| if total[i] == 0 { 1.0 } else { matched[i] as f64 / total[i] as f64 });
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport { bleu, precisions, brevity_penalty, hyp_len, ref_len })
}

/// Whitespace-tokenizes both sides of each line before scoring.
pub fn corpus_bleu_lines<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<BleuReport> {
    let split = |lines: &[S]| -> Vec<Vec<String>> {
        lines.iter().map(|l| l.as_ref().split_whitespace().map(str::to_owned).collect()).collect()
    };
    corpus_bleu(&split(hypotheses), &split(references))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_100() {
        let x = ["a b c d e", "f g h i"];
        let r = corpus_bleu_lines(&x, &x).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-9);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn disjoint_is_0() {
        let r = corpus_bleu_lines(&["a b c d"], &["e f g h"]).unwrap();
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn short_lines_match_themselves() {
        let x = ["a b", "c", "d e f"];
        let r = corpus_bleu_lines(&x, &x).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-9);
        assert_eq!(r.precisions[3], 1.0);
        assert_eq!(corpus_bleu_lines(&["a b"], &["c d"]).unwrap().bleu, 0.0);
    }

    #[test]
    fn pinned_fixture() {
        let hyp = [
            "the cat sat on the mat today",
            "a quick brown fox jumps over the lazy dog",
            "we will meet again at noon near the old bridge",
        ];
        let reference = [
            "the cat sat on a mat",
            "the quick brown fox jumped over the lazy dog",
            "we shall meet again at noon by the old bridge",
        ];
        let r = corpus_bleu_lines(&hyp, &reference).unwrap();
        assert!((r.bleu - 41.85536390262724).abs() < 1e-9, "{r}");
        let r = corpus_bleu_lines(&hyp[..2], &reference[..2]).unwrap();
        assert!((r.bleu - 43.472087194499146).abs() < 1e-9, "{r}");
    }

    #[test]
    fn errors() {
        let empty: [&str; 0] = [];
        assert!(corpus_bleu_lines(&empty, &empty).is_err());
        assert!(corpus_bleu_lines(&["a"], &["a", "b"]).is_err());
    }
}
