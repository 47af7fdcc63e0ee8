//! Evaluation metrics: ranking quality (AUC), thresholded accuracy, and the
//! systemic-event detection score (AUC of risk scores against the
//! generator's systemic flags).

use crate::error::{Error, Result};

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Metric("no scores to evaluate".to_string()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {bad}")));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {bad} is not binary")));
    }
    Ok(())
}

/// Probability that a uniformly random positive outranks a uniformly random
/// negative, ties counting one half. Rank-sum computation, O(n log n).
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(format!(
            "AUC undefined with {positives} positives and {negatives} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average 1-based ranks across tie groups, then sum positives' ranks.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of samples where `score >= threshold` agrees with the label.
pub fn compute_accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_scores(scores, labels)?;
    if !threshold.is_finite() {
        return Err(Error::Metric(format!("non-finite threshold {threshold}")));
    }
    let correct = scores
        .iter()
        .zip(labels.iter())
        .filter(|(s, &l)| u8::from(**s >= threshold) == l)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// AUC of the model's risk scores against systemic-event flags: how well
/// the score separates correlated-shock records from ordinary ones.
pub fn systemic_detection_score(scores: &[f64], flags: &[bool]) -> Result<f64> {
    let labels: Vec<u8> = flags.iter().map(|&f| u8::from(f)).collect();
    compute_auc(scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    /// All-pairs reference: wins count 1, ties 0.5.
    fn auc_brute_force(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn worked_example_scores_three_quarters() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 0, 1, 1];
        let auc = compute_auc(&scores, &labels).unwrap();
        assert!((auc - 0.75).abs() < 1e-15);
        assert_eq!(auc, auc_brute_force(&scores, &labels));
    }

    #[test]
    fn perfect_separation_scores_one() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [0, 0, 1, 1];
        assert_eq!(compute_auc(&scores, &labels).unwrap(), 1.0);
        let inverted = [1, 1, 0, 0];
        assert_eq!(compute_auc(&scores, &inverted).unwrap(), 0.0);
    }

    #[test]
    fn label_inversion_reflects_the_auc() {
        let mut rng = SeededRng::new(5, 0);
        let scores: Vec<f64> = (0..50).map(|_| rng.next_unit_f64()).collect();
        let labels: Vec<u8> = (0..50).map(|_| u8::from(rng.next_unit_f64() < 0.4)).collect();
        if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
            return;
        }
        let auc = compute_auc(&scores, &labels).unwrap();
        let flipped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
        let auc_flipped = compute_auc(&scores, &flipped).unwrap();
        assert!((auc + auc_flipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_scores_are_pure_ties() {
        let scores = [0.5; 10];
        let labels = [1, 0, 1, 0, 1, 0, 1, 0, 1, 0];
        assert_eq!(compute_auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn single_class_input_is_rejected() {
        let scores = [0.1, 0.2];
        assert!(matches!(
            compute_auc(&scores, &[1, 1]),
            Err(Error::Metric(_))
        ));
        assert!(matches!(
            compute_auc(&scores, &[0, 0]),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn rank_sum_matches_brute_force_on_random_instances() {
        for seed in 0..100u64 {
            let mut rng = SeededRng::new(seed, 1);
            let n = 2 + (seed as usize % 199);
            // Quantized scores force plenty of tie groups.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.next_unit_f64() * 20.0).floor() / 20.0)
                .collect();
            let mut labels: Vec<u8> =
                (0..n).map(|_| u8::from(rng.next_unit_f64() < 0.5)).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            let fast = compute_auc(&scores, &labels).unwrap();
            let slow = auc_brute_force(&scores, &labels);
            assert!(
                (fast - slow).abs() < 1e-12,
                "seed {seed}: rank-sum {fast} vs brute force {slow}"
            );
        }
    }

    #[test]
    fn accuracy_counts_threshold_agreements() {
        let scores = [0.9, 0.2, 0.6, 0.4];
        let labels = [1, 0, 0, 0];
        assert_eq!(compute_accuracy(&scores, &labels, 0.5).unwrap(), 0.75);
        assert_eq!(compute_accuracy(&scores, &[1, 0, 1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(compute_accuracy(&scores, &[0, 1, 0, 1], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn systemic_score_is_auc_on_flags() {
        let scores = [0.9, 0.8, 0.3, 0.2];
        let flags = [true, true, false, false];
        assert_eq!(systemic_detection_score(&scores, &flags).unwrap(), 1.0);
        let constant = [0.4; 4];
        assert_eq!(systemic_detection_score(&constant, &flags).unwrap(), 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn auc_stays_in_unit_interval(seed in 0u64..10_000) {
            let mut rng = SeededRng::new(seed, 2);
            let n = 2 + (seed as usize % 60);
            let scores: Vec<f64> = (0..n).map(|_| rng.next_unit_f64()).collect();
            let mut labels: Vec<u8> =
                (0..n).map(|_| u8::from(rng.next_unit_f64() < 0.5)).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            let auc = compute_auc(&scores, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&auc));
        }
    }
}
