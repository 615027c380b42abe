//! Sequence and text metrics.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

/// One aggregated metric value. Text scores are kept in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub count: usize,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, value: f64, count: usize) -> Self {
        assert!(value.is_finite(), "contract violation: metric value must be finite");
        Self { name: name.into(), value, count }
    }
}

/// Mean squared error over every position of every pair.
pub fn mse(pred: &[Vec<f64>], gold: &[Vec<f64>]) -> f64 {
    assert_eq!(pred.len(), gold.len(), "contract violation: {} predictions for {} targets", pred.len(), gold.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        assert_eq!(p.len(), g.len(), "contract violation: sequence lengths {} and {} differ", p.len(), g.len());
        sum += p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        n += p.len();
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean squared difference between mirrored positions around the centre of
/// an odd-length sequence; the centre itself is excluded.
pub fn symmetric_mse(seq: &[f64]) -> f64 {
    assert!(
        seq.len() >= 3 && seq.len() % 2 == 1,
        "contract violation: symmetric MSE needs an odd length of at least 3, got {}",
        seq.len()
    );
    let mid = seq.len() / 2;
    (1..=mid).map(|j| (seq[mid - j] - seq[mid + j]).powi(2)).sum::<f64>() / mid as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BleuMode {
    /// Add-one smoothing on bigram and higher orders without any match.
    SentenceSmoothed,
    /// Unsmoothed; counts are pooled over the corpus.
    Corpus,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram totals for orders 1..=4.
fn clipped_stats<T: Eq + Hash>(cand: &[T], refs: &[Vec<T>]) -> ([usize; 4], [usize; 4]) {
    let mut matches = [0; 4];
    let mut totals = [0; 4];
    for n in 1..=4 {
        let c = ngram_counts(cand, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in refs {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        totals[n - 1] = cand.len().saturating_sub(n - 1);
        matches[n - 1] = c.iter().map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    }
    (matches, totals)
}

/// Reference length closest to `c`, the shorter one on ties.
fn closest_ref_len<T>(c: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Geometric mean of the four clipped precisions. Orders the candidate is
/// too short to contain count as 1. With `smooth`, an order of two or more
/// with no match scores `1 / (total + 1)`; a unigram miss is never smoothed.
fn combine(matches: [usize; 4], totals: [usize; 4], smooth: bool) -> f64 {
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if totals[n] == 0 {
            1.0
        } else if matches[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else if smooth && n > 0 {
            1.0 / (totals[n] + 1) as f64
        } else {
            return 0.0;
        };
        log_sum += p.ln();
    }
    (log_sum / 4.0).exp()
}

/// BLEU-4 of one candidate against its references.
pub fn bleu4<T: Eq + Hash>(candidate: &[T], references: &[Vec<T>], mode: BleuMode) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let (m, t) = clipped_stats(candidate, references);
    let bp = brevity_penalty(candidate.len(), closest_ref_len(candidate.len(), references));
    bp * combine(m, t, mode == BleuMode::SentenceSmoothed)
}

/// Corpus BLEU-4: clipped counts and lengths pooled over all pairs, unsmoothed.
pub fn corpus_bleu4<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> f64 {
    assert_eq!(candidates.len(), references.len(), "contract violation: candidate and reference counts differ");
    let (mut m, mut t) = ([0; 4], [0; 4]);
    let (mut c_len, mut r_len) = (0, 0);
    for (c, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            continue;
        }
        let (cm, ct) = clipped_stats(c, refs);
        for n in 0..4 {
            m[n] += cm[n];
            t[n] += ct[n];
        }
        c_len += c.len();
        r_len += closest_ref_len(c.len(), refs);
    }
    if c_len == 0 {
        return 0.0;
    }
    brevity_penalty(c_len, r_len) * combine(m, t, false)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L F-measure (beta 1.2), maximised over references.
pub fn rouge_l<T: Eq>(candidate: &[T], references: &[Vec<T>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let l = lcs_len(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean sentence-smoothed BLEU-4 of each member against all the others.
/// Lower means a more diverse set.
pub fn self_bleu<T: Eq + Hash + Clone>(captions: &[Vec<T>]) -> f64 {
    assert!(captions.len() >= 2, "contract violation: Self-BLEU needs at least two captions, got {}", captions.len());
    let total: f64 = (0..captions.len())
        .map(|i| {
            let others: Vec<Vec<T>> = captions.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, c)| c.clone()).collect();
            bleu4(&captions[i], &others, BleuMode::SentenceSmoothed)
        })
        .sum();
    total / captions.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]), 0.0);
        assert_eq!(mse(&[vec![1.0, 1.0]], &[vec![0.0, 0.0]]), 1.0);
        assert_eq!(mse(&[vec![2.0], vec![0.0, 0.0, 0.0]], &[vec![0.0], vec![0.0, 0.0, 0.0]]), 1.0);
    }

    #[test]
    #[should_panic(expected = "differ")]
    fn mse_length_mismatch() {
        mse(&[vec![1.0]], &[vec![1.0, 2.0]]);
    }

    #[test]
    fn symmetric_mse_cases() {
        assert_eq!(symmetric_mse(&[1.0, 0.0, 3.0]), 4.0);
        assert_eq!(symmetric_mse(&[2.0, 5.0, 7.0, 5.0, 2.0]), 0.0);
        // pairs (1,5) and (0,0): (16 + 0) / 2
        assert_eq!(symmetric_mse(&[1.0, 0.0, 9.0, 0.0, 5.0]), 8.0);
    }

    #[test]
    #[should_panic(expected = "odd length")]
    fn symmetric_mse_even_length() {
        symmetric_mse(&[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "odd length")]
    fn symmetric_mse_too_short() {
        symmetric_mse(&[1.0]);
    }

    #[test]
    fn bleu_hand_counted() {
        let c = toks("a b c d e");
        let r = vec![toks("a b c d f")];
        let expected = (4.0 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0 * 1.0 / 2.0f64).powf(0.25);
        assert!((expected - 0.2f64.powf(0.25)).abs() < 1e-15);
        for mode in [BleuMode::Corpus, BleuMode::SentenceSmoothed] {
            assert!((bleu4(&c, &r, mode) - expected).abs() < 1e-12);
        }
        assert!((bleu4(&c, &r, BleuMode::Corpus) - 0.669).abs() < 1e-3);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = toks("a man is playing piano");
        assert_eq!(bleu4(&c, &[c.clone()], BleuMode::Corpus), 1.0);
        assert_eq!(bleu4(&c, &[toks("the dog runs fast home")], BleuMode::Corpus), 0.0);
        assert_eq!(bleu4::<&str>(&[], &[c.clone()], BleuMode::Corpus), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty() {
        // all precisions 1, c = 4, r = 5 -> exp(1 - 5/4)
        let b = bleu4(&toks("a b c d"), &[toks("a b c d e")], BleuMode::Corpus);
        assert!((b - (-0.25f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_clips_repeats() {
        // unigram: "the" x4 clipped to 2 -> 2/4; no higher-order matches beyond "the the"
        let c = toks("the the the the");
        let r = vec![toks("the the cat sat")];
        // bigrams: "the the" x3 clipped to 1 -> 1/3; trigrams 0/2 -> smoothed 1/3; 4-grams 0/1 -> 1/2
        let expected = (0.5f64 * (1.0 / 3.0) * (1.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu4(&c, &r, BleuMode::SentenceSmoothed) - expected).abs() < 1e-12);
        assert_eq!(bleu4(&c, &r, BleuMode::Corpus), 0.0);
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let c = vec![toks("a b c d e"), toks("a b c d e")];
        let r = vec![vec![toks("a b c d f")], vec![toks("a b c d e")]];
        // matches 9/10, 7/8, 5/6, 3/4
        let expected = (0.9f64 * 0.875 * (5.0 / 6.0) * 0.75).powf(0.25);
        assert!((corpus_bleu4(&c, &r) - expected).abs() < 1e-12);
    }

    #[test]
    fn rouge_cases() {
        let c = toks("a man is playing piano");
        assert_eq!(rouge_l(&c, &[c.clone()]), 1.0);
        assert_eq!(rouge_l(&c, &[toks("the dog runs")]), 0.0);
        let (p, r, b2) = (2.0 / 3.0, 1.0, 1.44);
        let expected = (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l(&toks("a b c"), &[toks("a c")]) - expected).abs() < 1e-12);
        // best reference wins
        assert!((rouge_l(&toks("a b c"), &[toks("x y"), toks("a c")]) - expected).abs() < 1e-12);
        assert_eq!(rouge_l::<&str>(&[], &[toks("a")]), 0.0);
    }

    #[test]
    fn self_bleu_cases() {
        let c = toks("a man is playing piano");
        assert_eq!(self_bleu(&vec![c.clone(); 8]), 1.0);
        let disjoint = vec![toks("a b c d e"), toks("f g h i j"), toks("k l m n o")];
        assert_eq!(self_bleu(&disjoint), 0.0);
        // unigram overlap only: 1/5, then 1/5, 1/4, 1/3 smoothed
        let partial = vec![toks("a b c d e"), toks("a g h i j")];
        let expected = (0.2f64 * 0.2 * 0.25 / 3.0).powf(0.25);
        assert!((self_bleu(&partial) - expected).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "at least two")]
    fn self_bleu_needs_two() {
        self_bleu(&[toks("a b")]);
    }

    fn seq() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..6, 1..9)
    }

    proptest! {
        #[test]
        fn bleu_of_self_is_one(x in seq()) {
            prop_assert!((bleu4(&x, &[x.clone()], BleuMode::SentenceSmoothed) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn scores_in_unit_interval(x in seq(), y in seq(), z in seq()) {
            for v in [bleu4(&x, &[y.clone(), z.clone()], BleuMode::SentenceSmoothed), bleu4(&x, &[y.clone()], BleuMode::Corpus), rouge_l(&x, &[y.clone()]), self_bleu(&[x.clone(), y.clone(), z.clone()])] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
        }

        #[test]
        fn relabeling_invariance(x in seq(), y in seq(), shift in 1u8..50) {
            let rx: Vec<u8> = x.iter().map(|t| t * 3 + shift).collect();
            let ry: Vec<u8> = y.iter().map(|t| t * 3 + shift).collect();
            prop_assert_eq!(bleu4(&x, &[y.clone()], BleuMode::SentenceSmoothed), bleu4(&rx, &[ry.clone()], BleuMode::SentenceSmoothed));
            prop_assert_eq!(rouge_l(&x, &[y.clone()]), rouge_l(&rx, &[ry.clone()]));
            prop_assert_eq!(self_bleu(&[x.clone(), y.clone()]), self_bleu(&[rx, ry]));
        }

        #[test]
        fn symmetric_mse_reversal(half in prop::collection::vec(-5.0f64..5.0, 1..6), mid in -5.0f64..5.0, other in prop::collection::vec(-5.0f64..5.0, 6)) {
            let mut s: Vec<f64> = half.clone();
            s.push(mid);
            s.extend(other.iter().take(half.len()));
            let mut r = s.clone();
            r.reverse();
            prop_assert_eq!(symmetric_mse(&s), symmetric_mse(&r));
            let mut pal = half.clone();
            pal.push(mid);
            pal.extend(half.iter().rev());
            prop_assert_eq!(symmetric_mse(&pal), 0.0);
        }
    }
}
