use std::collections::HashMap;

use crate::data::vocab::EOS;
use crate::error::{Error, Result};

/// Drops everything from the first `EOS` on.
pub fn trim_eos(seq: &[usize]) -> &[usize] {
    match seq.iter().position(|&t| t == EOS) {
        Some(i) => &seq[..i],
        None => seq,
    }
}

fn check_lists<H: AsRef<[usize]>, R: AsRef<[usize]>>(hyps: &[H], refs: &[R]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Input("cannot score an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    Ok(())
}

/// Fraction of hypotheses equal to their reference after trimming at `EOS`.
pub fn exact_match<H: AsRef<[usize]>, R: AsRef<[usize]>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    check_lists(hyps, refs)?;
    let hits = hyps
        .iter()
        .zip(refs)
        .filter(|(h, r)| trim_eos(h.as_ref()) == trim_eos(r.as_ref()))
        .count();
    Ok(hits as f64 / hyps.len() as f64)
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU on token ids, scaled to [0, 100].
///
/// Clipped n-gram matches are summed over the corpus. Orders n ≥ 2 use add-one
/// smoothing; the brevity penalty is `exp(1 − r/c)` when `c < r`.
pub fn corpus_bleu<H: AsRef<[usize]>, R: AsRef<[usize]>>(hyps: &[H], refs: &[R], max_n: usize) -> Result<f64> {
    check_lists(hyps, refs)?;
    if max_n == 0 {
        return Err(Error::Input("max_n must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (trim_eos(h.as_ref()), trim_eos(rf.as_ref()));
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, k)| (*k).min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if c == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if n == 0 {
            matches[0] as f64 / totals[0] as f64
        } else {
            (matches[n] as f64 + 1.0) / (totals[n] as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_cases() {
        let a = vec![vec![4, 5], vec![6], vec![7, 8], vec![9]];
        assert_eq!(exact_match(&a, &a).unwrap(), 1.0);
        let b = vec![vec![5], vec![7], vec![9], vec![4]];
        assert_eq!(exact_match(&a, &b).unwrap(), 0.0);
        let c = vec![vec![4, 5, EOS, 9], vec![7], vec![9], vec![4]];
        assert_eq!(exact_match(&a, &c).unwrap(), 0.25);
        assert!(exact_match::<Vec<usize>, Vec<usize>>(&[], &[]).is_err());
    }

    #[test]
    fn identical_corpus_scores_100() {
        let h = vec![vec![4, 5, 6, 7, 8], vec![9, 10, 11, 12]];
        assert!((corpus_bleu(&h, &h, 4).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn repeated_word_against_short_reference() {
        // "the the the" vs "the cat"
        let (the, cat) = (4, 5);
        let s = corpus_bleu(&[vec![the, the, the]], &[vec![the, cat]], 4).unwrap();
        // p1 = 1/3 (clipped), p2 = (0+1)/(2+1), p3 = (0+1)/(1+1), p4 = (0+1)/(0+1); c > r so no penalty
        let expected = 100.0 * ((1.0f64 / 3.0) * (1.0 / 3.0) * 0.5 * 1.0).powf(0.25);
        assert!((s - expected).abs() < 1e-9, "{s} vs {expected}");
    }

    #[test]
    fn brevity_penalty_for_half_length() {
        let r = vec![vec![4, 5, 6, 7, 8, 9, 10, 11]];
        let h = vec![vec![4, 5, 6, 7]];
        let s = corpus_bleu(&h, &r, 1).unwrap();
        assert!((s - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn order_invariant() {
        let h = vec![vec![4, 5, 6], vec![7, 8, 9, 4], vec![5, 5]];
        let r = vec![vec![4, 5, 7], vec![7, 8, 9, 9], vec![5, 6]];
        let a = corpus_bleu(&h, &r, 4).unwrap();
        let hp = vec![h[2].clone(), h[0].clone(), h[1].clone()];
        let rp = vec![r[2].clone(), r[0].clone(), r[1].clone()];
        assert_eq!(a, corpus_bleu(&hp, &rp, 4).unwrap());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(corpus_bleu::<Vec<usize>, Vec<usize>>(&[], &[], 4).is_err());
    }
}
