use std::collections::HashMap;

use super::Span;

/// Token-multiset overlap F1 between two token sequences.
pub fn token_f1<T: Eq + std::hash::Hash>(pred: &[T], gold: &[T]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&T, i64> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// `(EM, F1)` of `pred` against the best-matching gold span; both compare
/// the token ids covered by the spans in `sentence`.
pub fn answer_metrics(sentence: &[usize], pred: Span, golds: &[Span]) -> (f64, f64) {
    let toks = |s: Span| &sentence[s.start.min(sentence.len())..s.end.min(sentence.len())];
    let p = toks(pred);
    let mut em = 0.0f64;
    let mut f1 = 0.0f64;
    for &g in golds {
        let g = toks(g);
        if p == g {
            em = 1.0;
        }
        f1 = f1.max(token_f1(p, g));
    }
    (em, f1)
}

/// Dataset-level averages.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct QaMetrics {
    pub em: f64,
    pub f1: f64,
    pub count: usize,
}

impl QaMetrics {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut m = QaMetrics::default();
        for (em, f1) in pairs {
            m.em += em;
            m.f1 += f1;
            m.count += 1;
        }
        if m.count > 0 {
            m.em /= m.count as f64;
            m.f1 /= m.count as f64;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_scores_one() {
        let s = [4, 5, 6, 7];
        assert_eq!(answer_metrics(&s, Span::new(1, 3), &[Span::new(1, 3)]), (1.0, 1.0));
    }

    #[test]
    fn partial_overlap_hand_value() {
        // the red dog ran: pred {red, dog}, gold {the, red, dog}
        let s = [10, 11, 12, 13];
        let (em, f1) = answer_metrics(&s, Span::new(1, 3), &[Span::new(0, 3)]);
        assert_eq!(em, 0.0);
        assert!((f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn disjoint_spans_score_zero() {
        let s = [1, 2, 3, 4];
        assert_eq!(answer_metrics(&s, Span::new(0, 2), &[Span::new(2, 4)]), (0.0, 0.0));
    }

    #[test]
    fn best_gold_wins() {
        let s = [1, 2, 3, 4];
        let (em, f1) = answer_metrics(&s, Span::new(2, 4), &[Span::new(0, 1), Span::new(2, 4)]);
        assert_eq!((em, f1), (1.0, 1.0));
    }
}
