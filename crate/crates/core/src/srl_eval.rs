//! Span algebra for comparing QA answers with argument spans: IOU, three
//! matching regimes, and the answer-to-argument mapping upper bound.
//! Labels are carried but never compared.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::read_jsonl;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledSpan {
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub label: String,
}

impl LabeledSpan {
    pub fn new(start: usize, end: usize) -> Self {
        LabeledSpan {
            start,
            end,
            label: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shares at least one token with `other`.
    pub fn intersects(&self, other: &LabeledSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

pub fn iou(a: &LabeledSpan, b: &LabeledSpan) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Matcher {
    Exact,
    /// Counts a pair as matched when IOU ≥ θ.
    Iou(f64),
}

impl Matcher {
    fn accepts(self, v: f64) -> bool {
        match self {
            Matcher::Exact => v >= 1.0,
            Matcher::Iou(theta) => v > 0.0 && v >= theta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Prf {
    pub fn from_counts(matched_pred: usize, n_pred: usize, matched_gold: usize, n_gold: usize) -> Self {
        Self::from_pr(ratio(matched_pred, n_pred), ratio(matched_gold, n_gold))
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

/// Greedy one-to-one matching: candidate pairs in descending IOU order
/// (ties by prediction index, then gold index), neither side reused.
pub fn greedy_match(preds: &[LabeledSpan], golds: &[LabeledSpan], matcher: Matcher) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in golds.iter().enumerate() {
            let v = iou(p, g);
            if matcher.accepts(v) {
                cands.push((v, i, j));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; preds.len()];
    let mut used_g = vec![false; golds.len()];
    let mut out = Vec::new();
    for (_, i, j) in cands {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out
}

pub fn span_prf(preds: &[LabeledSpan], golds: &[LabeledSpan], matcher: Matcher) -> Prf {
    let m = greedy_match(preds, golds, matcher).len();
    Prf::from_counts(m, preds.len(), m, golds.len())
}

fn coverage(spans: &[LabeledSpan]) -> BTreeSet<usize> {
    spans.iter().flat_map(|s| s.start..s.end).collect()
}

/// `(|pred tokens|, |gold tokens|, |overlap|)` over covered positions.
pub fn token_counts(preds: &[LabeledSpan], golds: &[LabeledSpan]) -> (usize, usize, usize) {
    let p = coverage(preds);
    let g = coverage(golds);
    let both = p.intersection(&g).count();
    (p.len(), g.len(), both)
}

pub fn token_prf(preds: &[LabeledSpan], golds: &[LabeledSpan]) -> Prf {
    let (p, g, both) = token_counts(preds, golds);
    Prf::from_counts(both, p, both, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchReport {
    pub span: Prf,
    pub iou: Prf,
    pub token: Prf,
}

pub fn match_report(preds: &[LabeledSpan], golds: &[LabeledSpan]) -> MatchReport {
    MatchReport {
        span: span_prf(preds, golds, Matcher::Exact),
        iou: span_prf(preds, golds, Matcher::Iou(0.5)),
        token: token_prf(preds, golds),
    }
}

/// Corpus scores: span regimes and token regime micro-averaged over
/// sentences, plus the per-sentence macro average of the token regime.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusReport {
    pub span: Prf,
    pub iou: Prf,
    pub token_micro: Prf,
    pub token_macro: Prf,
    pub sentences: usize,
}

pub fn corpus_report(sentences: &[(Vec<LabeledSpan>, Vec<LabeledSpan>)]) -> CorpusReport {
    let (mut np, mut ng, mut ms, mut mi) = (0, 0, 0, 0);
    let (mut tp, mut tg, mut tb) = (0, 0, 0);
    let (mut mp, mut mr) = (0.0, 0.0);
    for (preds, golds) in sentences {
        np += preds.len();
        ng += golds.len();
        ms += greedy_match(preds, golds, Matcher::Exact).len();
        mi += greedy_match(preds, golds, Matcher::Iou(0.5)).len();
        let (p, g, b) = token_counts(preds, golds);
        tp += p;
        tg += g;
        tb += b;
        mp += ratio(b, p);
        mr += ratio(b, g);
    }
    let n = sentences.len();
    CorpusReport {
        span: Prf::from_counts(ms, np, ms, ng),
        iou: Prf::from_counts(mi, np, mi, ng),
        token_micro: Prf::from_counts(tb, tp, tb, tg),
        token_macro: Prf::from_pr(ratio_f(mp, n), ratio_f(mr, n)),
        sentences: n,
    }
}

fn ratio_f(a: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        a / n as f64
    }
}

/// Keeps answers that intersect some gold argument, then repeatedly
/// replaces any two intersecting kept spans by their covering span until
/// none intersect. Output is sorted by start.
pub fn mapping_upper_bound(answers: &[LabeledSpan], gold_arguments: &[LabeledSpan]) -> Vec<LabeledSpan> {
    let mut kept: Vec<LabeledSpan> = answers
        .iter()
        .filter(|a| !a.is_empty() && gold_arguments.iter().any(|g| a.intersects(g)))
        .map(|a| LabeledSpan::new(a.start, a.end))
        .collect();
    'outer: loop {
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                if kept[i].intersects(&kept[j]) {
                    let b = kept.swap_remove(j);
                    let a = &mut kept[i];
                    a.start = a.start.min(b.start);
                    a.end = a.end.max(b.end);
                    continue 'outer;
                }
            }
        }
        break;
    }
    kept.sort();
    kept.dedup();
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OverlapFractions {
    /// Share with ≥1 intersecting counterpart.
    pub overlapped: f64,
    /// Share with an identical counterpart.
    pub exact: f64,
    /// Share with a counterpart at IOU ≥ 0.5.
    pub iou_half: f64,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OverlapStats {
    /// Over gold arguments, looking for answers.
    pub arguments: OverlapFractions,
    /// Over answers, looking for gold arguments.
    pub answers: OverlapFractions,
}

fn fractions<'a>(items: impl Iterator<Item = (&'a LabeledSpan, &'a [LabeledSpan])>) -> OverlapFractions {
    let (mut n, mut o, mut e, mut h) = (0, 0, 0, 0);
    for (x, others) in items {
        n += 1;
        o += others.iter().any(|y| x.intersects(y)) as usize;
        e += others.iter().any(|y| x.start == y.start && x.end == y.end) as usize;
        h += others.iter().any(|y| iou(x, y) >= 0.5) as usize;
    }
    OverlapFractions {
        overlapped: ratio(o, n),
        exact: ratio(e, n),
        iou_half: ratio(h, n),
        total: n,
    }
}

/// Per-sentence `(answers, gold_arguments)` pairs.
pub fn corpus_overlap_stats(sentences: &[(Vec<LabeledSpan>, Vec<LabeledSpan>)]) -> OverlapStats {
    OverlapStats {
        arguments: fractions(
            sentences
                .iter()
                .flat_map(|(a, g)| g.iter().map(move |x| (x, a.as_slice()))),
        ),
        answers: fractions(
            sentences
                .iter()
                .flat_map(|(a, g)| a.iter().map(move |x| (x, g.as_slice()))),
        ),
    }
}

/// One line of a span file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub sentence_id: String,
    pub spans: Vec<LabeledSpan>,
}

pub fn read_span_file(path: impl AsRef<Path>) -> Result<Vec<SpanRecord>> {
    let path = path.as_ref();
    let rows: Vec<SpanRecord> = read_jsonl(path)?;
    for (i, r) in rows.iter().enumerate() {
        if let Some(bad) = r.spans.iter().find(|s| s.start >= s.end) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: empty or reversed span [{}, {})", i + 1, bad.start, bad.end),
            });
        }
    }
    Ok(rows)
}

/// Pairs answer spans with gold spans by `sentence_id`, in gold order.
/// Gold sentences without answers get none; an answer line whose
/// sentence has no gold line is an error.
pub fn align_span_files(answers: &[SpanRecord], gold: &[SpanRecord]) -> Result<Vec<(Vec<LabeledSpan>, Vec<LabeledSpan>)>> {
    let mut by_id: BTreeMap<&str, Vec<LabeledSpan>> = BTreeMap::new();
    for a in answers {
        by_id.entry(&a.sentence_id).or_default().extend(a.spans.iter().cloned());
    }
    let mut out = Vec::with_capacity(gold.len());
    let mut seen = BTreeSet::new();
    for g in gold {
        if !seen.insert(g.sentence_id.as_str()) {
            return Err(Error::Integrity {
                id: g.sentence_id.clone(),
                message: "sentence appears twice in the gold file".into(),
            });
        }
        out.push((by_id.remove(g.sentence_id.as_str()).unwrap_or_default(), g.spans.clone()));
    }
    if let Some(id) = by_id.keys().next() {
        return Err(Error::Integrity {
            id: id.to_string(),
            message: "answers given for a sentence missing from the gold file".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(a: usize, b: usize) -> LabeledSpan {
        LabeledSpan::new(a, b)
    }

    #[test]
    fn span_files_align_by_sentence_id() {
        let rec = |id: &str, spans: Vec<LabeledSpan>| SpanRecord {
            sentence_id: id.into(),
            spans,
        };
        let gold = vec![rec("a", vec![s(0, 1)]), rec("b", vec![s(2, 3)])];
        let answers = vec![rec("b", vec![s(2, 4)])];
        let pairs = align_span_files(&answers, &gold).unwrap();
        assert!(pairs[0].0.is_empty());
        assert_eq!(pairs[1].0, vec![s(2, 4)]);
        assert!(align_span_files(&[rec("zz", vec![])], &gold).is_err());
    }

    #[test]
    fn iou_hand_values() {
        assert_eq!(iou(&s(2, 5), &s(2, 5)), 1.0);
        assert_eq!(iou(&s(0, 2), &s(3, 5)), 0.0);
        assert!((iou(&s(0, 4), &s(2, 6)) - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn token_prf_hand_values() {
        let p = token_prf(&[s(1, 6)], &[s(0, 3), s(5, 8)]);
        assert!((p.precision - 0.6).abs() < 1e-12);
        assert!((p.recall - 0.5).abs() < 1e-12);
        assert!((p.f1 - 6.0 / 11.0).abs() < 1e-12);
        assert_eq!(token_prf(&[s(0, 2)], &[s(4, 6)]), Prf::default());
    }

    #[test]
    fn empty_predictions_score_zero() {
        assert_eq!(span_prf(&[], &[s(0, 1)], Matcher::Exact), Prf::default());
    }

    #[test]
    fn identical_sets_score_one() {
        let g = vec![s(0, 2), s(3, 7)];
        let r = match_report(&g, &g);
        for p in [r.span, r.iou, r.token] {
            assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn hand_traced_mapping_fixture() {
        let golds = vec![s(0, 3), s(5, 8)];
        let answers = vec![s(1, 4), s(3, 6), s(10, 12)];
        let out = mapping_upper_bound(&answers, &golds);
        assert_eq!(out, vec![s(1, 6)]);
        let r = match_report(&out, &golds);
        assert_eq!(r.span, Prf::default());
        assert_eq!(r.iou, Prf::default());
        assert!((r.token.precision - 0.6).abs() < 1e-12 && (r.token.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adjacent_spans_are_not_merged() {
        let out = mapping_upper_bound(&[s(0, 2), s(2, 4)], &[s(0, 4)]);
        assert_eq!(out, vec![s(0, 2), s(2, 4)]);
    }

    #[test]
    fn overlap_stats_identity_and_empty() {
        let g = vec![s(0, 2), s(4, 5)];
        let st = corpus_overlap_stats(&[(g.clone(), g.clone())]);
        assert_eq!((st.arguments.overlapped, st.arguments.exact, st.arguments.iou_half), (1.0, 1.0, 1.0));
        assert_eq!((st.answers.overlapped, st.answers.exact, st.answers.iou_half), (1.0, 1.0, 1.0));
        let st = corpus_overlap_stats(&[(vec![], g)]);
        assert_eq!((st.arguments.overlapped, st.arguments.exact, st.arguments.iou_half), (0.0, 0.0, 0.0));
    }

    #[test]
    fn overlap_stats_two_sentence_fixture() {
        // sentence 1: answers [0,2) [5,9); args [0,2) [4,8) [10,11)
        // sentence 2: answers [1,3);       args [2,6)
        let data = vec![
            (vec![s(0, 2), s(5, 9)], vec![s(0, 2), s(4, 8), s(10, 11)]),
            (vec![s(1, 3)], vec![s(2, 6)]),
        ];
        let st = corpus_overlap_stats(&data);
        // args: [0,2) exact; [4,8) vs [5,9) iou 3/5; [10,11) none; [2,6) vs [1,3) iou 1/5
        assert_eq!(st.arguments.total, 4);
        assert_eq!(st.arguments.overlapped, 0.75);
        assert_eq!(st.arguments.exact, 0.25);
        assert_eq!(st.arguments.iou_half, 0.5);
        // answers: all three overlap; one exact; two at IOU ≥ 0.5
        assert_eq!(st.answers.overlapped, 1.0);
        assert!((st.answers.exact - 1.0 / 3.0).abs() < 1e-12);
        assert!((st.answers.iou_half - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn theta_one_equals_exact() {
        let p = vec![s(0, 3), s(4, 6), s(7, 9)];
        let g = vec![s(0, 3), s(4, 7), s(7, 9)];
        assert_eq!(span_prf(&p, &g, Matcher::Iou(1.0)), span_prf(&p, &g, Matcher::Exact));
    }

    #[test]
    fn corpus_micro_and_macro() {
        let data = vec![(vec![s(0, 2)], vec![s(0, 2)]), (vec![s(0, 4)], vec![s(0, 1)])];
        let r = corpus_report(&data);
        // micro: pred tokens 6, gold 3, overlap 3
        assert!((r.token_micro.precision - 0.5).abs() < 1e-12);
        assert_eq!(r.token_micro.recall, 1.0);
        // macro precision: (1 + 1/4) / 2
        assert!((r.token_macro.precision - 0.625).abs() < 1e-12);
        assert_eq!(r.span.precision, 0.5);
    }
}
