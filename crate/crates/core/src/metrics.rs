//! Diversity metrics over sets of sampled responses.
//!
//! Everything here works on opaque token sequences: token ids, or words
//! after an external detokenizer. Values are fractions in `[0, 1]` for
//! Distinct-N and `[0, 100]` for BLEU.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use crate::error::{Error, Result};

/// BLEU smoothing: a zero n-gram match count is replaced by this value.
pub const BLEU_EPSILON: f64 = 0.1;
pub const BLEU_MAX_ORDER: usize = 4;

/// All responses sampled for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSet<T> {
    pub prompt_id: String,
    pub responses: Vec<Vec<T>>,
}

impl<T> ResponseSet<T> {
    pub fn new(prompt_id: impl Into<String>, responses: Vec<Vec<T>>) -> Self {
        Self {
            prompt_id: prompt_id.into(),
            responses,
        }
    }
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::arg("n-gram order must be at least 1"));
    }
    Ok(())
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.into_iter().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Unique-to-total n-gram ratio of one sequence; `None` when it is shorter
/// than `n`.
pub fn distinct_ratio<T: Eq + Hash>(seq: &[T], n: usize) -> Option<f64> {
    if n == 0 || seq.len() < n {
        return None;
    }
    let total = seq.len() - n + 1;
    let unique: HashSet<&[T]> = seq.windows(n).collect();
    Some(unique.len() as f64 / total as f64)
}

/// Distinct-N averaged per response, then per prompt. Responses shorter
/// than `n` are skipped.
pub fn distinct_n<T: Eq + Hash>(sets: &[ResponseSet<T>], n: usize) -> Result<f64> {
    check_n(n)?;
    let per_prompt = sets
        .iter()
        .filter_map(|s| mean(s.responses.iter().filter_map(|r| distinct_ratio(r, n))));
    mean(per_prompt).ok_or_else(|| Error::UndefinedMetric(format!("every response is shorter than {n} tokens")))
}

/// Corpus-level Distinct-N: unique n-grams across every response over the
/// total n-gram count.
pub fn distinct_n_pooled<T: Eq + Hash>(sets: &[ResponseSet<T>], n: usize) -> Result<f64> {
    check_n(n)?;
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for r in sets.iter().flat_map(|s| &s.responses) {
        if r.len() >= n {
            total += r.len() - n + 1;
            unique.extend(r.windows(n));
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric(format!(
            "every response is shorter than {n} tokens"
        )));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Distinct-N restricted to n-grams whose last token was produced at a
/// flagged step. `flags[p][r][i]` marks token `i` of response `r` of set
/// `p`. Averaged like [`distinct_n`].
pub fn distinct_n_flagged<T: Eq + Hash>(sets: &[ResponseSet<T>], flags: &[Vec<Vec<bool>>], n: usize) -> Result<f64> {
    check_n(n)?;
    if flags.len() != sets.len() {
        return Err(Error::arg("one flag set per response set required"));
    }
    let mut per_prompt = Vec::new();
    for (set, set_flags) in sets.iter().zip(flags) {
        if set_flags.len() != set.responses.len() {
            return Err(Error::arg(format!(
                "flag count mismatch for prompt `{}`",
                set.prompt_id
            )));
        }
        let ratios = set.responses.iter().zip(set_flags).filter_map(|(r, f)| {
            let grams: Vec<&[T]> = r
                .windows(n)
                .enumerate()
                .filter(|(i, _)| f.get(i + n - 1).copied().unwrap_or(false))
                .map(|(_, w)| w)
                .collect();
            if grams.is_empty() {
                return None;
            }
            let unique: HashSet<&[T]> = grams.iter().copied().collect();
            Some(unique.len() as f64 / grams.len() as f64)
        });
        if let Some(m) = mean(ratios) {
            per_prompt.push(m);
        }
    }
    mean(per_prompt).ok_or_else(|| Error::UndefinedMetric("no flagged n-grams".into()))
}

/// Sentence BLEU-4 of `candidate` against one `reference`, scaled to
/// `[0, 100]`.
///
/// Uniform weights over orders 1-4, clipped n-gram precision, brevity
/// penalty `exp(1 - r/c)` when the candidate is not longer than the
/// reference, and a zero match count replaced by [`BLEU_EPSILON`]. Orders
/// for which the candidate has no n-grams at all are left out of the
/// geometric mean. An empty candidate scores 0.
pub fn sentence_bleu<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=BLEU_MAX_ORDER {
        if candidate.len() < n {
            break;
        }
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total = candidate.len() - n + 1;
        let matches: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let numer = if matches == 0 { BLEU_EPSILON } else { matches as f64 };
        log_sum += (numer / total as f64).ln();
        orders += 1;
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * (log_sum / orders as f64).exp()
}

/// Mean BLEU over every ordered pair of distinct responses (lower means
/// more diverse).
pub fn pairwise_bleu<T: Eq + Hash>(set: &ResponseSet<T>) -> Result<f64> {
    let rs = &set.responses;
    if rs.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "pairwise BLEU needs at least two responses, prompt `{}` has {}",
            set.prompt_id,
            rs.len()
        )));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, cand) in rs.iter().enumerate() {
        for (j, reference) in rs.iter().enumerate() {
            if i != j {
                sum += sentence_bleu(cand, reference);
                pairs += 1;
            }
        }
    }
    Ok(sum / pairs as f64)
}

/// [`pairwise_bleu`] averaged over every prompt with at least two responses.
pub fn mean_pairwise_bleu<T: Eq + Hash>(sets: &[ResponseSet<T>]) -> Result<f64> {
    let values: Vec<f64> = sets
        .iter()
        .filter(|s| s.responses.len() >= 2)
        .map(pairwise_bleu)
        .collect::<Result<_>>()?;
    mean(values).ok_or_else(|| Error::UndefinedMetric("no prompt has two or more responses".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn set<'a>(rs: &[&'a str]) -> ResponseSet<&'a str> {
        ResponseSet::new("p", rs.iter().map(|r| words(r)).collect())
    }

    #[test]
    fn distinct_examples() {
        assert_eq!(distinct_n(&[set(&["a b c"])], 1).unwrap(), 1.0);
        assert!((distinct_n(&[set(&["a a a a"])], 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let one = distinct_n(&[set(&["a b a c"])], 1).unwrap();
        let two = distinct_n(&[set(&["a b a c", "a b a c"])], 1).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn distinct_skips_short_responses() {
        assert_eq!(distinct_n(&[set(&["a", "a b"])], 2).unwrap(), 1.0);
        assert!(matches!(
            distinct_n(&[set(&["a", "b"])], 2),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(distinct_n(&[set(&["a"])], 0).is_err());
    }

    #[test]
    fn pooled_distinct_counts_across_responses() {
        let s = set(&["a b", "a b"]);
        assert_eq!(distinct_n_pooled(std::slice::from_ref(&s), 1).unwrap(), 0.5);
        assert_eq!(distinct_n(&[s], 1).unwrap(), 1.0);
    }

    #[test]
    fn flagged_distinct_uses_last_token_flag() {
        let s = ResponseSet::new("p", vec![vec![1, 1, 1, 2]]);
        let flags = vec![vec![vec![false, true, true, false]]];
        // bigrams ending at 1 and 2: (1,1), (1,1)
        assert_eq!(distinct_n_flagged(&[s], &flags, 2).unwrap(), 0.5);
    }

    #[test]
    fn bleu_identical_triple_is_hundred() {
        let s = set(&[
            "the cat sat on the mat",
            "the cat sat on the mat",
            "the cat sat on the mat",
        ]);
        assert!((pairwise_bleu(&s).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_disjoint_pair_is_smoothing_floor() {
        // 100 * (0.1/4 * 0.1/3 * 0.1/2 * 0.1/1)^(1/4)
        let s = set(&["a b c d", "e f g h"]);
        let expected = 100.0 * (0.025f64 * (0.1 / 3.0) * 0.05 * 0.1).powf(0.25);
        assert!((pairwise_bleu(&s).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 4.518_010_018_049_224).abs() < 1e-9);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let cand = words("a b c d");
        let reference = words("a b c d e f g h");
        let expected = 100.0 * (1.0f64 - 2.0).exp();
        assert!((sentence_bleu(&cand, &reference) - expected).abs() < 1e-9);
    }

    #[test]
    fn bleu_needs_two_responses() {
        assert!(matches!(
            pairwise_bleu(&set(&["a b c d"])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn replacing_duplicate_with_disjoint_never_raises_bleu() {
        let before = pairwise_bleu(&set(&["a b c d e", "a b c d e", "a b x d e"])).unwrap();
        let after = pairwise_bleu(&set(&["a b c d e", "p q r s t", "a b x d e"])).unwrap();
        assert!(after <= before);
    }

    proptest! {
        #[test]
        fn metrics_ignore_response_order(
            rs in prop::collection::vec(prop::collection::vec(0u8..6, 0..12), 2..6),
            rot in 0usize..6,
        ) {
            let a = ResponseSet::new("p", rs.clone());
            let mut rotated = rs.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let b = ResponseSet::new("p", rotated);
            for n in 1..=3 {
                match (distinct_n(std::slice::from_ref(&a), n), distinct_n(std::slice::from_ref(&b), n)) {
                    (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-12),
                    (Err(_), Err(_)) => {}
                    _ => prop_assert!(false, "order changed definedness"),
                }
            }
            prop_assert!((pairwise_bleu(&a).unwrap() - pairwise_bleu(&b).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn bleu_in_range(a in prop::collection::vec(0u8..5, 0..15), b in prop::collection::vec(0u8..5, 0..15)) {
            let s = sentence_bleu(&a, &b);
            prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
        }
    }
}
