//! Token-level evaluation metrics.

use std::collections::HashMap;

use crate::error::{Error, Result};

fn bigram_counts<T: Eq + std::hash::Hash + Copy>(seq: &[T]) -> HashMap<(T, T), usize> {
    let mut counts = HashMap::new();
    for w in seq.windows(2) {
        *counts.entry((w[0], w[1])).or_insert(0) += 1;
    }
    counts
}

/// ROUGE-2 F1 over bigram multisets with clipped overlap.
///
/// Sequences shorter than two tokens have no bigrams; the score is then 0,
/// except for two identical single-token sequences, which score 1.
pub fn rouge2_f1<T: Eq + std::hash::Hash + Copy>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.len() < 2 || reference.len() < 2 {
        return if candidate.len() == 1 && candidate == reference { 1.0 } else { 0.0 };
    }
    let cand = bigram_counts(candidate);
    let reference_counts = bigram_counts(reference);
    let overlap: usize = cand
        .iter()
        .map(|(bg, &c)| c.min(reference_counts.get(bg).copied().unwrap_or(0)))
        .sum();
    let precision = overlap as f64 / (candidate.len() - 1) as f64;
    let recall = overlap as f64 / (reference.len() - 1) as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// ROUGE-2 F1 on whitespace-tokenized text.
pub fn rouge2_f1_text(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    rouge2_f1(&c, &r)
}

/// Mean of `-logprobs[i][targets[i]]` over positions whose target is not `pad`.
/// Returns 0 when every position is padding.
pub fn mean_cross_entropy(logprobs: &[Vec<f64>], targets: &[usize], pad: Option<usize>) -> Result<f64> {
    if logprobs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} log-probability rows for {} targets",
            logprobs.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &t) in logprobs.iter().zip(targets) {
        if Some(t) == pad {
            continue;
        }
        let lp = row.get(t).ok_or_else(|| {
            Error::InvalidArgument(format!("target {t} outside vocabulary of {}", row.len()))
        })?;
        total -= lp;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_identical_and_disjoint() {
        assert_eq!(rouge2_f1(&[1, 2, 3, 4], &[1, 2, 3, 4]), 1.0);
        assert_eq!(rouge2_f1(&[1, 2, 3], &[4, 5, 6]), 0.0);
    }

    #[test]
    fn rouge_hand_count() {
        // Bigrams: ref {ab, bc, cd}, cand {ab, bx, xd}; overlap 1 of 3.
        assert_eq!(rouge2_f1_text("a b x d", "a b c d"), 1.0 / 3.0);
    }

    #[test]
    fn rouge_short_sequences() {
        assert_eq!(rouge2_f1(&[7], &[7]), 1.0);
        assert_eq!(rouge2_f1(&[7], &[8]), 0.0);
        assert_eq!(rouge2_f1(&[7], &[7, 8]), 0.0);
        assert_eq!(rouge2_f1::<u32>(&[], &[]), 0.0);
    }

    #[test]
    fn rouge_clips_repeats() {
        // cand has "a a" three times, ref once: overlap clipped to 1.
        let f = rouge2_f1(&["a", "a", "a", "a"], &["a", "a", "b"]);
        let (p, r) = (1.0 / 3.0, 1.0 / 2.0);
        assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = vec![vec![-(64f64.ln()); 64]];
        assert!((mean_cross_entropy(&uniform, &[5], None).unwrap() - 64f64.ln()).abs() < 1e-15);

        let certain = vec![vec![0.0, f64::NEG_INFINITY]];
        assert_eq!(mean_cross_entropy(&certain, &[0], None).unwrap(), 0.0);

        let two = vec![vec![0.0, -5.0], vec![-5.0, -2.0]];
        assert_eq!(mean_cross_entropy(&two, &[0, 1], None).unwrap(), 1.0);

        assert!(mean_cross_entropy(&two, &[0], None).is_err());
        assert!(mean_cross_entropy(&two, &[0, 9], None).is_err());
        assert_eq!(mean_cross_entropy(&two, &[0, 0], Some(0)).unwrap(), 0.0);
    }
}
