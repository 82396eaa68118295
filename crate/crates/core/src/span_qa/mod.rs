//! Span objective, decoding, answer metrics and the QA training loop.

mod decode;
mod loss;
mod metrics;
mod train;

pub use decode::{decode_beam, decode_greedy, SpanPrediction};
pub use loss::{batch_span_loss, span_loss};
pub use metrics::{answer_metrics, token_f1, QaMetrics};
pub use train::{evaluate, predict, train_qa, EpochRecord, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::encoder::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Mode, ParamStore, Tensor};

pub const DEFAULT_MAX_ANSWER_LENGTH: usize = 30;

/// Half-open token interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnswer {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// A tokenized QA pair with gold spans over the sentence tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub sentence: Vec<String>,
    pub question: Vec<String>,
    pub answers: Vec<GoldAnswer>,
}

impl QAExample {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::Integrity {
            id: self.id.clone(),
            message: m,
        };
        if self.answers.is_empty() {
            return Err(bad("no gold answer".into()));
        }
        for a in &self.answers {
            if a.start >= a.end || a.end > self.sentence.len() {
                return Err(bad(format!(
                    "gold span [{}, {}) outside sentence of {} tokens",
                    a.start,
                    a.end,
                    self.sentence.len()
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self, vocab: &Vocabulary) -> EncodedQA {
        let ids = |toks: &[String]| toks.iter().map(|t| vocab.id(t)).collect();
        EncodedQA {
            sentence: ids(&self.sentence),
            question: ids(&self.question),
            answers: self.answers.iter().map(|a| Span::new(a.start, a.end)).collect(),
        }
    }
}

/// Token-id view of a [`QAExample`], as consumed by the models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedQA {
    pub sentence: Vec<usize>,
    pub question: Vec<usize>,
    pub answers: Vec<Span>,
}

impl EncodedQA {
    pub fn from_text(sentence: &str, question: &str, answers: Vec<Span>, vocab: &Vocabulary) -> Self {
        EncodedQA {
            sentence: tokenize(sentence, vocab),
            question: tokenize(question, vocab),
            answers,
        }
    }
}

/// Start/end logits over sentence positions for a batch. Row `b` is valid
/// on its first `lengths[b]` columns.
#[derive(Debug, Clone)]
pub struct SpanLogits {
    pub start: Tensor,
    pub end: Tensor,
    pub mask: Mask,
    pub lengths: Vec<usize>,
}

impl SpanLogits {
    /// Valid logits of row `b` as plain vectors.
    pub fn row(&self, b: usize) -> (Vec<f32>, Vec<f32>) {
        let t = self.start.shape()[1];
        let n = self.lengths[b];
        (
            self.start.data()[b * t..b * t + n].to_vec(),
            self.end.data()[b * t..b * t + n].to_vec(),
        )
    }
}

/// Anything with a span head that the shared training loop can drive.
pub trait SpanModel {
    fn span_logits(&self, batch: &[&EncodedQA], mode: &mut Mode<'_>) -> Result<SpanLogits>;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Inference beam width; 1 means greedy decoding.
    fn beam_width(&self) -> usize;
    fn max_answer_length(&self) -> usize;
    /// Rejects examples the model cannot consume.
    fn check_lengths(&self, example: &EncodedQA) -> Result<()>;
}
