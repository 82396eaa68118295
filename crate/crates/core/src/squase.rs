//! s-QuASE: a question-independent sentence encoding h(S), fused with the
//! question by bidirectional attention only above the sentence-modeling
//! stack.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::encoder::{Encoder, EncoderConfig, TokenBatch, TransformerStack};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::span_qa::{EncodedQA, SpanLogits, SpanModel, DEFAULT_MAX_ANSWER_LENGTH};
use crate::tensor::{no_grad, Mask, Mode, ParamId, ParamStore, Tensor};

pub const SQUASE_KIND: &str = "squase";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    Transformer,
    TwoLayerMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    I,
    II,
    III,
    IV,
    V,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Variant::I,
            "II" | "2" => Variant::II,
            "III" | "3" => Variant::III,
            "IV" | "4" => Variant::IV,
            "V" | "5" => Variant::V,
            _ => return Err(Error::Config(format!("unknown s-QuASE variant {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SQuaseConfig {
    pub encoder: EncoderConfig,
    pub n_sentence_modeling_layers: usize,
    pub n_question_modeling_layers: usize,
    pub n_interaction_layers: usize,
    pub interaction_kind: InteractionKind,
    pub use_bidaf: bool,
    pub share_base_encoder: bool,
    pub freeze_base: bool,
    /// Run the interaction transformer over question positions too.
    pub interaction_includes_question: bool,
    /// 1 = greedy decoding.
    pub beam_width: usize,
    pub max_answer_length: usize,
}

impl SQuaseConfig {
    /// Full model: 2/2/1 layers, BiDAF, transformer interaction.
    pub fn new(encoder: EncoderConfig) -> Self {
        SQuaseConfig {
            encoder,
            n_sentence_modeling_layers: 2,
            n_question_modeling_layers: 2,
            n_interaction_layers: 1,
            interaction_kind: InteractionKind::Transformer,
            use_bidaf: true,
            share_base_encoder: true,
            freeze_base: false,
            interaction_includes_question: false,
            beam_width: 1,
            max_answer_length: DEFAULT_MAX_ANSWER_LENGTH,
        }
    }

    pub fn variant(level: Variant, encoder: EncoderConfig) -> Self {
        let mut c = SQuaseConfig::new(encoder);
        c.n_sentence_modeling_layers = 1;
        c.n_question_modeling_layers = 1;
        c.interaction_kind = InteractionKind::TwoLayerMlp;
        c.use_bidaf = false;
        c.freeze_base = true;
        if level >= Variant::II {
            c.freeze_base = false;
        }
        if level >= Variant::III {
            c.use_bidaf = true;
        }
        if level >= Variant::IV {
            c.interaction_kind = InteractionKind::Transformer;
        }
        if level >= Variant::V {
            c.n_sentence_modeling_layers = 2;
            c.n_question_modeling_layers = 2;
            c.beam_width = 5;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.beam_width == 0 || self.max_answer_length == 0 {
            return Err(Error::Config("beam_width and max_answer_length must be ≥ 1".into()));
        }
        Ok(())
    }
}

impl PartialOrd for Variant {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some((*self as u8).cmp(&(*other as u8)))
    }
}

#[derive(Debug, Clone)]
enum Interaction {
    Transformer(TransformerStack),
    Mlp(Mlp),
}

/// h(S) for one sentence: `[T_s, d]`.
#[derive(Debug, Clone)]
pub struct SentenceEncoding {
    pub vectors: Tensor,
    /// `alignment[i]` is the input token index of row `i`.
    pub alignment: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SQuaseModel {
    pub config: SQuaseConfig,
    pub store: ParamStore,
    base: Encoder,
    question_base: Option<Encoder>,
    sentence_modeling: TransformerStack,
    question_modeling: TransformerStack,
    bidaf_w: Option<ParamId>,
    fusion: Option<Linear>,
    interaction: Interaction,
    span_head: Linear,
}

impl SQuaseModel {
    pub fn new(config: &SQuaseConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = &config.encoder;
        let d = e.d_model;
        let base = Encoder::new(&mut store, "encoder", e, &mut rng)?;
        let question_base = if config.share_base_encoder {
            None
        } else {
            Some(Encoder::new(&mut store, "question_encoder", e, &mut rng)?)
        };
        let stack = |store: &mut ParamStore, name: &str, n: usize, rng: &mut ChaCha8Rng| {
            TransformerStack::new(store, name, n, d, e.n_heads, e.d_ff, e.activation, e.dropout_p, rng)
        };
        let sentence_modeling = stack(&mut store, "sentence_modeling", config.n_sentence_modeling_layers, &mut rng)?;
        let question_modeling = stack(&mut store, "question_modeling", config.n_question_modeling_layers, &mut rng)?;
        let (bidaf_w, fusion) = if config.use_bidaf {
            let std = (1.0 / (3 * d) as f32).sqrt();
            let w = store.randn("bidaf/w", &[3 * d], std, &mut rng)?;
            (Some(w), Some(Linear::new(&mut store, "fusion", 4 * d, d, &mut rng)?))
        } else {
            (None, None)
        };
        let interaction = match config.interaction_kind {
            InteractionKind::Transformer => {
                Interaction::Transformer(stack(&mut store, "interaction", config.n_interaction_layers, &mut rng)?)
            }
            InteractionKind::TwoLayerMlp => {
                Interaction::Mlp(Mlp::new(&mut store, "interaction", d, e.d_ff, d, e.activation, &mut rng)?)
            }
        };
        let span_head = Linear::new(&mut store, "span_head", d, 2, &mut rng)?;
        if config.freeze_base {
            store.set_trainable("encoder/", false);
            store.set_trainable("question_encoder/", false);
        }
        Ok(SQuaseModel {
            config: config.clone(),
            store,
            base,
            question_base,
            sentence_modeling,
            question_modeling,
            bidaf_w,
            fusion,
            interaction,
            span_head,
        })
    }

    fn check_sentence(&self, s: &[usize]) -> Result<()> {
        let budget = self.config.encoder.max_positions;
        if s.is_empty() {
            return Err(Error::contract("empty sentence"));
        }
        if s.len() > budget {
            return Err(Error::Length {
                what: "sentence",
                len: s.len(),
                budget,
            });
        }
        Ok(())
    }

    fn check_question(&self, q: &[usize]) -> Result<()> {
        let budget = self.config.encoder.max_positions;
        if q.is_empty() {
            return Err(Error::contract("empty question"));
        }
        if q.len() > budget {
            return Err(Error::Length {
                what: "question",
                len: q.len(),
                budget,
            });
        }
        Ok(())
    }

    /// h(S) for a padded batch of sentences, `[B, T, d]`. Only sentence
    /// tokens enter this computation.
    pub fn encode_sentences(&self, sentences: &[&[usize]], pad_to: Option<usize>, mode: &mut Mode<'_>) -> Result<(Tensor, Mask)> {
        for s in sentences {
            self.check_sentence(s)?;
        }
        let seqs: Vec<Vec<usize>> = sentences.iter().map(|s| s.to_vec()).collect();
        let batch = TokenBatch::from_sequences(&seqs, pad_to)?;
        let mask = batch.mask();
        let h = self.base.forward(&self.store, &batch, mode)?;
        Ok((self.sentence_modeling.forward(&self.store, &h, &mask, mode)?, mask))
    }

    /// Inference-mode h(S) of a single sentence.
    pub fn encode_sentence(&self, sentence: &[usize]) -> Result<SentenceEncoding> {
        no_grad(|| {
            let (h, _) = self.encode_sentences(&[sentence], None, &mut Mode::Infer)?;
            let (t, d) = (sentence.len(), self.config.encoder.d_model);
            Ok(SentenceEncoding {
                vectors: h.reshape(&[t, d])?,
                alignment: (0..t).collect(),
            })
        })
    }

    fn encode_questions(&self, questions: &[&[usize]], mode: &mut Mode<'_>) -> Result<(Tensor, Mask)> {
        for q in questions {
            self.check_question(q)?;
        }
        let seqs: Vec<Vec<usize>> = questions.iter().map(|q| q.to_vec()).collect();
        let batch = TokenBatch::from_sequences(&seqs, None)?;
        let mask = batch.mask();
        let enc = self.question_base.as_ref().unwrap_or(&self.base);
        let h = enc.forward(&self.store, &batch, mode)?;
        Ok((self.question_modeling.forward(&self.store, &h, &mask, mode)?, mask))
    }

    /// Question-aware sentence features entering the interaction layer.
    fn fuse(&self, hs: &Tensor, s_mask: &Mask, hq: &Tensor, q_mask: &Mask) -> Result<Tensor> {
        match (self.bidaf_w, &self.fusion) {
            (Some(w), Some(fusion)) => {
                let g = bidaf_attention(self.store.get(w), hs, s_mask, hq, q_mask)?;
                fusion.forward(&self.store, &g)
            }
            _ => {
                let b = hq.shape()[0];
                let pooled = hq.mean_pool_over_time(q_mask)?;
                hs.add(&pooled.reshape(&[b, 1, self.config.encoder.d_model])?)
            }
        }
    }

    /// Span logits for aligned sentence/question lists.
    pub fn forward_batch(&self, sentences: &[&[usize]], questions: &[&[usize]], mode: &mut Mode<'_>) -> Result<SpanLogits> {
        Ok(self.forward_with_encoding(sentences, questions, mode)?.0)
    }

    /// [`Self::forward_batch`] plus the `[B, T, d]` sentence encoding it
    /// consumed.
    pub fn forward_with_encoding(
        &self,
        sentences: &[&[usize]],
        questions: &[&[usize]],
        mode: &mut Mode<'_>,
    ) -> Result<(SpanLogits, Tensor)> {
        if sentences.len() != questions.len() || sentences.is_empty() {
            return Err(Error::contract("need one question per sentence and a non-empty batch"));
        }
        let (hs, s_mask) = self.encode_sentences(sentences, None, mode)?;
        let (hq, q_mask) = self.encode_questions(questions, mode)?;
        let fused = self.fuse(&hs, &s_mask, &hq, &q_mask)?;
        let (b, ts) = (hs.shape()[0], hs.shape()[1]);
        let top = match &self.interaction {
            Interaction::Mlp(mlp) => mlp.forward(&self.store, &fused)?,
            Interaction::Transformer(stack) if self.config.interaction_includes_question => {
                let tq = hq.shape()[1];
                let x = Tensor::concat(&[&fused, &hq], 1)?;
                let mut m = Vec::with_capacity(b * (ts + tq));
                for r in 0..b {
                    m.extend_from_slice(&s_mask.data()[r * ts..(r + 1) * ts]);
                    m.extend_from_slice(&q_mask.data()[r * tq..(r + 1) * tq]);
                }
                let mask = Mask::new(m, &[b, ts + tq])?;
                stack.forward(&self.store, &x, &mask, mode)?.slice(1, 0..ts)?
            }
            Interaction::Transformer(stack) => stack.forward(&self.store, &fused, &s_mask, mode)?,
        };
        let logits = self.span_head.forward(&self.store, &top)?;
        let out = SpanLogits {
            start: logits.slice(2, 0..1)?.reshape(&[b, ts])?,
            end: logits.slice(2, 1..2)?.reshape(&[b, ts])?,
            mask: s_mask,
            lengths: sentences.iter().map(|s| s.len()).collect(),
        };
        Ok((out, hs))
    }

    /// `(start_logits, end_logits)`, each `[T_s]`.
    pub fn forward_qa(&self, sentence: &[usize], question: &[usize], mode: &mut Mode<'_>) -> Result<(Tensor, Tensor)> {
        let l = self.forward_batch(&[sentence], &[question], mode)?;
        let t = sentence.len();
        Ok((l.start.reshape(&[t])?, l.end.reshape(&[t])?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        checkpoint::save(path, SQUASE_KIND, config, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let config: SQuaseConfig = ckpt.config_as(SQUASE_KIND)?;
        let mut model = SQuaseModel::new(&config, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }
}

impl SpanModel for SQuaseModel {
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
        self.check_sentence(&ex.sentence)?;
        self.check_question(&ex.question)
    }
}

/// BiDAF features `[h_s; c2q; h_s∘c2q; h_s∘q2s]`, shape `[B, T_s, 4d]`.
///
/// `S_ij = w·[h_s_i; h_q_j; h_s_i∘h_q_j]`; c2q attends over question
/// positions per sentence position, q2s softmaxes `max_j S_ij` over
/// sentence positions and is broadcast to every position.
pub fn bidaf_attention(w: &Tensor, hs: &Tensor, s_mask: &Mask, hq: &Tensor, q_mask: &Mask) -> Result<Tensor> {
    let (b, ts, d) = (hs.shape()[0], hs.shape()[1], hs.shape()[2]);
    let tq = hq.shape()[1];
    if hq.shape()[0] != b || hq.shape()[2] != d || w.shape() != [3 * d] {
        return Err(Error::Dimension {
            op: "bidaf_attention",
            lhs: hs.shape().to_vec(),
            rhs: hq.shape().to_vec(),
        });
    }
    if tq == 0 || q_mask.data().chunks(tq).any(|r| !r.iter().any(|&m| m)) {
        return Err(Error::contract("bidirectional attention needs a non-empty question"));
    }
    let w1 = w.slice(0, 0..d)?.reshape(&[d, 1])?;
    let w2 = w.slice(0, d..2 * d)?.reshape(&[d, 1])?;
    let w3 = w.slice(0, 2 * d..3 * d)?;
    let sim = hs
        .mul(&w3)?
        .matmul(&hq.transpose_last()?)?
        .add(&hs.matmul(&w1)?)?
        .add(&hq.matmul(&w2)?.reshape(&[b, 1, tq])?)?;
    let a = sim.masked_softmax(&q_mask.reshape(&[b, 1, tq])?, 2)?;
    let c2q = a.matmul(hq)?;
    let row_max = sim.permute(&[0, 2, 1])?.max_pool_over_time(q_mask)?;
    let beta = row_max.masked_softmax(s_mask, 1)?;
    let q2s = beta.reshape(&[b, 1, ts])?.matmul(hs)?;
    Tensor::concat(&[hs, &c2q, &hs.mul(&c2q)?, &hs.mul(&q2s)?], 2)
}
