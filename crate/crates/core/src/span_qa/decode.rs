use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::Span;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    /// `log p_start(start) + log p_end(end − 1)`.
    pub score: f64,
}

impl SpanPrediction {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

fn log_softmax(x: &[f32]) -> Vec<f64> {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    let lz = x.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v as f64 - m - lz).collect()
}

/// Better-first order: higher score, then smaller start, then smaller end.
fn rank(a: &SpanPrediction, b: &SpanPrediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.cmp(&b.start))
        .then(a.end.cmp(&b.end))
}

fn for_each_valid(start_logits: &[f32], end_logits: &[f32], max_len: usize, mut f: impl FnMut(SpanPrediction)) {
    let t = start_logits.len().min(end_logits.len());
    if t == 0 {
        return;
    }
    let ls = log_softmax(&start_logits[..t]);
    let le = log_softmax(&end_logits[..t]);
    for s in 0..t {
        for e in s + 1..=(s + max_len).min(t) {
            f(SpanPrediction {
                start: s,
                end: e,
                score: ls[s] + le[e - 1],
            });
        }
    }
}

/// Best valid span `start < end ≤ start + max_answer_length`. Returns
/// `None` only for empty input or `max_answer_length == 0`.
pub fn decode_greedy(start_logits: &[f32], end_logits: &[f32], max_answer_length: usize) -> Option<SpanPrediction> {
    let mut best: Option<SpanPrediction> = None;
    for_each_valid(start_logits, end_logits, max_answer_length, |p| {
        if best.map_or(true, |b| rank(&p, &b) == Ordering::Less) {
            best = Some(p);
        }
    });
    best
}

struct Ranked(SpanPrediction);

impl PartialEq for Ranked {
    fn eq(&self, o: &Self) -> bool {
        rank(&self.0, &o.0) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Ranked {
    // Max-heap top is the worst kept candidate.
    fn cmp(&self, o: &Self) -> Ordering {
        rank(&self.0, &o.0)
    }
}

/// The `beam_width` best valid spans, best first. Exact: every valid pair
/// competes for a slot in a bounded heap.
pub fn decode_beam(start_logits: &[f32], end_logits: &[f32], beam_width: usize, max_answer_length: usize) -> Vec<SpanPrediction> {
    let k = beam_width.max(1);
    let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
    for_each_valid(start_logits, end_logits, max_answer_length, |p| {
        if heap.len() < k {
            heap.push(Ranked(p));
        } else if rank(&p, &heap.peek().unwrap().0) == Ordering::Less {
            heap.pop();
            heap.push(Ranked(p));
        }
    });
    let mut out: Vec<SpanPrediction> = heap.into_iter().map(|r| r.0).collect();
    out.sort_by(rank);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_has_one_span() {
        let p = decode_greedy(&[0.3], &[-1.0], 30).unwrap();
        assert_eq!((p.start, p.end), (0, 1));
    }

    #[test]
    fn crossed_peaks_yield_valid_span() {
        // start peaks at 2, end peaks at 1 (i.e. end index 2 exclusive)
        let s = [0.0, 0.0, 5.0, 0.0];
        let e = [0.0, 5.0, 0.0, 0.0];
        let p = decode_greedy(&s, &e, 30).unwrap();
        assert!(p.start < p.end);
        let mut best = (f64::NEG_INFINITY, 0, 0);
        let ls = log_softmax(&s);
        let le = log_softmax(&e);
        for a in 0..4 {
            for b in a + 1..=4 {
                if ls[a] + le[b - 1] > best.0 {
                    best = (ls[a] + le[b - 1], a, b);
                }
            }
        }
        assert_eq!((p.start, p.end), (best.1, best.2));
    }

    #[test]
    fn ties_prefer_smaller_start_then_end() {
        let z = [0.0; 3];
        let p = decode_greedy(&z, &z, 30).unwrap();
        assert_eq!((p.start, p.end), (0, 1));
        let all = decode_beam(&z, &z, 10, 30);
        assert_eq!(all.len(), 6);
        assert_eq!(
            all.iter().map(|p| (p.start, p.end)).collect::<Vec<_>>(),
            vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        );
    }

    #[test]
    fn max_length_respected() {
        let s = [5.0, 0.0, 0.0, 0.0];
        let e = [0.0, 0.0, 0.0, 5.0];
        let p = decode_greedy(&s, &e, 2).unwrap();
        assert!(p.end - p.start <= 2);
    }

    #[test]
    fn beam_one_is_greedy() {
        let s = [0.1, 2.0, -1.0, 0.7];
        let e = [1.1, 0.2, 0.3, 0.9];
        assert_eq!(decode_beam(&s, &e, 1, 30)[0], decode_greedy(&s, &e, 30).unwrap());
    }
}
