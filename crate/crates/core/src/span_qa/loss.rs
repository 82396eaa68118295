use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

use super::{Span, SpanLogits};

/// `½·[CE(start, s) + CE(end, e−1)]`, minimised over the gold spans.
pub fn span_loss(start_logits: &Tensor, end_logits: &Tensor, golds: &[Span]) -> Result<Tensor> {
    if start_logits.rank() != 1 || start_logits.shape() != end_logits.shape() {
        return Err(Error::Dimension {
            op: "span_loss",
            lhs: start_logits.shape().to_vec(),
            rhs: end_logits.shape().to_vec(),
        });
    }
    let t = start_logits.numel();
    let logits = SpanLogits {
        start: start_logits.reshape(&[1, t])?,
        end: end_logits.reshape(&[1, t])?,
        mask: Mask::all(&[1, t]),
        lengths: vec![t],
    };
    batch_span_loss(&logits, &[golds])
}

/// Mean over the batch of the per-example span loss.
pub fn batch_span_loss(logits: &SpanLogits, golds: &[&[Span]]) -> Result<Tensor> {
    let b = logits.lengths.len();
    if golds.len() != b {
        return Err(Error::contract(format!("{} gold lists for a batch of {b}", golds.len())));
    }
    let t = logits.start.shape()[1];
    let ls = logits.start.masked_log_softmax(&logits.mask, 1)?;
    let le = logits.end.masked_log_softmax(&logits.mask, 1)?;
    let mut per_example = Vec::with_capacity(b);
    for (row, spans) in golds.iter().enumerate() {
        if spans.is_empty() {
            return Err(Error::contract(format!("example {row} has no gold span")));
        }
        let n = logits.lengths[row];
        for s in spans.iter() {
            if s.start >= s.end || s.end > n {
                return Err(Error::contract(format!(
                    "gold span [{}, {}) outside sentence of {n} tokens",
                    s.start, s.end
                )));
            }
        }
        let si: Vec<usize> = spans.iter().map(|s| row * t + s.start).collect();
        let ei: Vec<usize> = spans.iter().map(|s| row * t + s.end - 1).collect();
        let nll = ls.pick(&si)?.add(&le.pick(&ei)?)?.scale(-0.5);
        per_example.push(if spans.len() == 1 { nll.reshape(&[1])? } else { nll.min()?.reshape(&[1])? });
    }
    let refs: Vec<&Tensor> = per_example.iter().collect();
    Ok(Tensor::concat(&refs, 0)?.mean())
}
