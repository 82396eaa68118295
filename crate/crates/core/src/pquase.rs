//! p-QuASE: sentence and question packed into one sequence, so the
//! sentence vectors h_A(S) are conditioned on the question.

use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::encoder::{BatchRow, Encoder, EncoderConfig, TokenBatch, CLS, SEP};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::span_qa::{EncodedQA, SpanLogits, SpanModel, DEFAULT_MAX_ANSWER_LENGTH};
use crate::tensor::{no_grad, Mask, Mode, ParamStore, Tensor};

pub const PQUASE_KIND: &str = "pquase";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PQuaseConfig {
    pub encoder: EncoderConfig,
    /// Packed-length budget; never above `encoder.max_positions`.
    pub max_seq_len: usize,
    /// Pack `[CLS] Q [SEP] S [SEP]` instead of `[CLS] S [SEP] Q [SEP]`.
    pub question_first: bool,
    pub freeze_base: bool,
    pub beam_width: usize,
    pub max_answer_length: usize,
}

impl PQuaseConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        PQuaseConfig {
            max_seq_len: encoder.max_positions,
            encoder,
            question_first: false,
            freeze_base: false,
            beam_width: 1,
            max_answer_length: DEFAULT_MAX_ANSWER_LENGTH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.max_seq_len > self.encoder.max_positions {
            return Err(Error::Config(format!(
                "max_seq_len {} exceeds max_positions {}",
                self.max_seq_len, self.encoder.max_positions
            )));
        }
        if self.beam_width == 0 || self.max_answer_length == 0 {
            return Err(Error::Config("beam_width and max_answer_length must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One packed row plus where each segment landed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedPair {
    pub row: BatchRow,
    pub sentence_range: Range<usize>,
    pub question_range: Range<usize>,
}

/// `[CLS] S [SEP] Q [SEP]` (or with S and Q swapped). Segment 0 runs
/// through the first `[SEP]`, segment 1 covers the rest.
pub fn pack_pair(sentence: &[usize], question: &[usize], max_len: usize, question_first: bool) -> Result<PackedPair> {
    if sentence.is_empty() {
        return Err(Error::contract("empty sentence"));
    }
    if question.is_empty() {
        return Err(Error::contract("empty question"));
    }
    let total = sentence.len() + question.len() + 3;
    if total > max_len {
        return Err(Error::Length {
            what: "packed sentence+question",
            len: total,
            budget: max_len,
        });
    }
    let (first, second) = if question_first { (question, sentence) } else { (sentence, question) };
    let mut token_ids = Vec::with_capacity(total);
    token_ids.push(CLS);
    token_ids.extend_from_slice(first);
    token_ids.push(SEP);
    token_ids.extend_from_slice(second);
    token_ids.push(SEP);
    let split = first.len() + 2;
    let mut segment_ids = vec![0; split];
    segment_ids.resize(total, 1);
    let first_range = 1..1 + first.len();
    let second_range = split..split + second.len();
    let (sentence_range, question_range) = if question_first {
        (second_range, first_range)
    } else {
        (first_range, second_range)
    };
    Ok(PackedPair {
        row: BatchRow {
            token_ids,
            segment_ids,
        },
        sentence_range,
        question_range,
    })
}

/// h_A(S) over the whole packed sequence, `[T, d]`.
#[derive(Debug, Clone)]
pub struct ConditionalEncoding {
    pub vectors: Tensor,
    pub sentence_range: Range<usize>,
    pub question_range: Range<usize>,
}

/// `[max-pool ; mean-pool]` over the sentence range, `[2d]`.
pub fn pooled_pair_representation(enc: &ConditionalEncoding) -> Result<Tensor> {
    let r = enc.sentence_range.clone();
    if r.is_empty() {
        return Err(Error::DegenerateSlice { op: "pooled_pair_representation" });
    }
    let span = enc.vectors.slice(0, r.clone())?;
    let mask = Mask::all(&[r.len()]);
    Tensor::concat(&[&span.max_pool_over_time(&mask)?, &span.mean_pool_over_time(&mask)?], 0)
}

#[derive(Debug, Clone)]
pub struct PQuaseModel {
    pub config: PQuaseConfig,
    pub store: ParamStore,
    base: Encoder,
    span_head: Linear,
}

/// Encoder output for a packed batch, with per-row sentence positions
/// gathered into a `[B, S_max, d]` block.
struct PackedForward {
    sentence_vectors: Tensor,
    sentence_mask: Mask,
    lengths: Vec<usize>,
}

impl PQuaseModel {
    pub fn new(config: &PQuaseConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let base = Encoder::new(&mut store, "encoder", &config.encoder, &mut rng)?;
        let span_head = Linear::new(&mut store, "span_head", config.encoder.d_model, 2, &mut rng)?;
        if config.freeze_base {
            store.set_trainable("encoder/", false);
        }
        Ok(PQuaseModel {
            config: config.clone(),
            store,
            base,
            span_head,
        })
    }

    pub fn pack(&self, sentence: &[usize], question: &[usize]) -> Result<PackedPair> {
        pack_pair(sentence, question, self.config.max_seq_len, self.config.question_first)
    }

    fn packed_forward(&self, sentences: &[&[usize]], questions: &[&[usize]], mode: &mut Mode<'_>) -> Result<PackedForward> {
        if sentences.len() != questions.len() || sentences.is_empty() {
            return Err(Error::contract("need one question per sentence and a non-empty batch"));
        }
        let packs: Vec<PackedPair> = sentences
            .iter()
            .zip(questions)
            .map(|(s, q)| self.pack(s, q))
            .collect::<Result<_>>()?;
        let rows: Vec<BatchRow> = packs.iter().map(|p| p.row.clone()).collect();
        let batch = TokenBatch::from_rows(&rows, None)?;
        let h = self.base.forward(&self.store, &batch, mode)?;
        let (b, t, d) = (batch.batch_size, batch.seq_len, self.config.encoder.d_model);
        let lengths: Vec<usize> = packs.iter().map(|p| p.sentence_range.len()).collect();
        let smax = *lengths.iter().max().unwrap();
        let mut idx = Vec::with_capacity(b * smax);
        for (r, p) in packs.iter().enumerate() {
            for k in 0..smax {
                // Padding slots point at the row's own [CLS]; they are masked.
                let pos = if k < p.sentence_range.len() { p.sentence_range.start + k } else { 0 };
                idx.push(r * t + pos);
            }
        }
        let sentence_vectors = h.reshape(&[b * t, d])?.gather_rows(&idx)?.reshape(&[b, smax, d])?;
        Ok(PackedForward {
            sentence_vectors,
            sentence_mask: Mask::from_lengths(&lengths, smax),
            lengths,
        })
    }

    /// Inference-mode h_A(S) for one pair.
    pub fn conditional_encode(&self, sentence: &[usize], question: &[usize]) -> Result<ConditionalEncoding> {
        let p = self.pack(sentence, question)?;
        no_grad(|| {
            let batch = TokenBatch::from_rows(std::slice::from_ref(&p.row), None)?;
            let h = self.base.forward(&self.store, &batch, &mut Mode::Infer)?;
            Ok(ConditionalEncoding {
                vectors: h.reshape(&[batch.seq_len, self.config.encoder.d_model])?,
                sentence_range: p.sentence_range,
                question_range: p.question_range,
            })
        })
    }

    /// Pooled `[B, 2d]` pair vectors; differentiable so the encoder can be
    /// tuned through a downstream classifier.
    pub fn pooled_batch(&self, sentences: &[&[usize]], questions: &[&[usize]], mode: &mut Mode<'_>) -> Result<Tensor> {
        let f = self.packed_forward(sentences, questions, mode)?;
        let mx = f.sentence_vectors.max_pool_over_time(&f.sentence_mask)?;
        let mean = f.sentence_vectors.mean_pool_over_time(&f.sentence_mask)?;
        Tensor::concat(&[&mx, &mean], 1)
    }

    pub fn forward_batch(&self, sentences: &[&[usize]], questions: &[&[usize]], mode: &mut Mode<'_>) -> Result<SpanLogits> {
        let f = self.packed_forward(sentences, questions, mode)?;
        let (b, s) = (f.lengths.len(), f.sentence_vectors.shape()[1]);
        let logits = self.span_head.forward(&self.store, &f.sentence_vectors)?;
        Ok(SpanLogits {
            start: logits.slice(2, 0..1)?.reshape(&[b, s])?,
            end: logits.slice(2, 1..2)?.reshape(&[b, s])?,
            mask: f.sentence_mask,
            lengths: f.lengths,
        })
    }

    /// Logits over the sentence range only, each `[T_s]`.
    pub fn forward_qa(&self, sentence: &[usize], question: &[usize], mode: &mut Mode<'_>) -> Result<(Tensor, Tensor)> {
        let l = self.forward_batch(&[sentence], &[question], mode)?;
        let t = sentence.len();
        Ok((l.start.reshape(&[t])?, l.end.reshape(&[t])?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        checkpoint::save(path, PQUASE_KIND, config, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let config: PQuaseConfig = ckpt.config_as(PQUASE_KIND)?;
        let mut model = PQuaseModel::new(&config, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }
}

impl SpanModel for PQuaseModel {
    fn span_logits(&self, batch: &[&EncodedQA], mode: &mut Mode<'_>) -> Result<SpanLogits> {
        let s: Vec<&[usize]> = batch.iter().map(|e| e.sentence.as_slice()).collect();
        let q: Vec<&[usize]> = batch.iter().map(|e| e.question.as_slice()).collect();
        self.forward_batch(&s, &q, mode)
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn beam_width(&self) -> usize {
        self.config.beam_width
    }
    fn max_answer_length(&self) -> usize {
        self.config.max_answer_length
    }
    fn check_lengths(&self, ex: &EncodedQA) -> Result<()> {
        self.pack(&ex.sentence, &ex.question).map(|_| ())
    }
}
