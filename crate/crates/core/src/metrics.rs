use crate::error::{Error, Result};

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half.
///
/// Sorts once and credits each tied group of scores with half its
/// positive/negative pairs, so the cost is `O(n log n)`.
pub fn evaluate_auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Auroc(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Auroc("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Auroc("both classes must be present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut wins = 0.0;
    let mut negatives_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        wins += pos as f64 * (negatives_below as f64 + 0.5 * neg as f64);
        negatives_below += neg;
        i = j;
    }
    Ok(wins / (positives as f64 * negatives as f64))
}

/// Class-id convenience wrapper: class 1 is the positive class.
pub fn auroc_for_classes(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let labels: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    evaluate_auroc(scores, &labels)
}

/// Macro one-vs-rest AUROC over classes that have both positives and
/// negatives. `probs[r][c]` is the probability of class `c` for row `r`.
pub fn macro_auroc(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let classes = probs.first().map_or(0, Vec::len);
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let is_c: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Ok(a) = evaluate_auroc(&scores, &is_c) {
            total += a;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Auroc("no class has both positives and negatives".into()));
    }
    Ok(total / counted as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(evaluate_auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(evaluate_auroc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(
            evaluate_auroc(&[0.5, 0.5, 0.2], &[true, false, false]).unwrap(),
            0.75
        );
    }

    #[test]
    fn errors() {
        assert!(evaluate_auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(evaluate_auroc(&[0.1], &[true, false]).is_err());
        assert!(evaluate_auroc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs
    }

    proptest! {
        #[test]
        fn matches_pairwise_definition(
            data in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| f64::from(*s) / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let fast = evaluate_auroc(&scores, &labels).unwrap();
            prop_assert!((fast - pairwise(&scores, &labels)).abs() < 1e-12);
        }
    }
}
