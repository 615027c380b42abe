//! Middle-word sources of controlled accuracy.

use crate::rng::RngStream;

/// Where non-oracle middle words come from.
#[derive(Debug, Clone, Copy)]
pub enum MiddleWordSource<'a> {
    /// Mix the oracle word with these classifier predictions.
    Classifier(&'a [usize]),
    /// Replace the oracle word by a uniformly drawn wrong word out of `vocab`.
    Corruption { vocab: usize },
}

/// Fraction of items that must take the classifier word so that the mixed
/// accuracy equals `target`: `(1 - target) / (1 - classifier_accuracy)`,
/// clamped to `[0, 1]`.
pub fn sampling_ratio(target: f64, classifier_accuracy: f64) -> f64 {
    if classifier_accuracy >= 1.0 {
        return if target >= 1.0 { 0.0 } else { 1.0 };
    }
    ((1.0 - target) / (1.0 - classifier_accuracy)).clamp(0.0, 1.0)
}

/// Middle words whose expected accuracy against `oracle` is `target`.
///
/// With a classifier source each item takes the classifier word with
/// probability [`sampling_ratio`], otherwise the oracle word, so targets at or
/// below the classifier's own accuracy reproduce the raw predictions. With
/// the corruption source each oracle word is replaced by a different word
/// with probability `1 - target`.
pub fn simulate_classifier_accuracy(oracle: &[usize], source: MiddleWordSource<'_>, target: f64, rng: &mut RngStream) -> Vec<usize> {
    assert!((0.0..=1.0).contains(&target), "contract violation: target accuracy {target} outside [0, 1]");
    match source {
        MiddleWordSource::Classifier(pred) => {
            assert_eq!(pred.len(), oracle.len(), "contract violation: oracle and classifier lengths differ");
            let ratio = sampling_ratio(target, accuracy(oracle, pred));
            oracle.iter().zip(pred).map(|(&o, &p)| if rng.bernoulli(ratio) { p } else { o }).collect()
        }
        MiddleWordSource::Corruption { vocab } => {
            assert!(vocab >= 2, "contract violation: corruption needs at least two words");
            oracle
                .iter()
                .map(|&o| {
                    if rng.bernoulli(1.0 - target) {
                        let w = rng.below(vocab as u64 - 1) as usize;
                        if w >= o {
                            w + 1
                        } else {
                            w
                        }
                    } else {
                        o
                    }
                })
                .collect()
        }
    }
}

/// Fraction of positions where `a` and `b` agree.
pub fn accuracy(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_for_a_weak_classifier() {
        // classifier accuracy 31.64%: reaching 50% and 75% needs ratios 73.14% and 36.57%.
        assert!((sampling_ratio(0.5, 0.3164) - 0.7314).abs() < 1e-4);
        assert!((sampling_ratio(0.75, 0.3164) - 0.3657).abs() < 1e-4);
        assert_eq!(sampling_ratio(0.3164, 0.3164), 1.0);
        assert_eq!(sampling_ratio(1.0, 0.3164), 0.0);
    }

    #[test]
    fn endpoints() {
        let oracle: Vec<usize> = (0..200).map(|i| i % 7).collect();
        let pred: Vec<usize> = oracle.iter().map(|&o| (o + 1) % 7).collect();
        let mut rng = RngStream::new(3);
        let all = simulate_classifier_accuracy(&oracle, MiddleWordSource::Classifier(&pred), 1.0, &mut rng);
        assert_eq!(all, oracle);
        let none = simulate_classifier_accuracy(&oracle, MiddleWordSource::Classifier(&pred), 0.0, &mut rng);
        assert_eq!(none, pred);
    }

    #[test]
    fn mixed_accuracy_tracks_target() {
        let oracle: Vec<usize> = (0..20000).map(|i| i % 11).collect();
        let pred: Vec<usize> = oracle.iter().enumerate().map(|(i, &o)| if i % 10 < 3 { o } else { (o + 1) % 11 }).collect();
        let mut rng = RngStream::new(4);
        for target in [0.5, 0.75] {
            let mixed = simulate_classifier_accuracy(&oracle, MiddleWordSource::Classifier(&pred), target, &mut rng);
            assert!((accuracy(&oracle, &mixed) - target).abs() < 0.015);
            let corrupt = simulate_classifier_accuracy(&oracle, MiddleWordSource::Corruption { vocab: 11 }, target, &mut rng);
            assert!((accuracy(&oracle, &corrupt) - target).abs() < 0.015);
            assert!(corrupt.iter().all(|&w| w < 11));
        }
    }
}
