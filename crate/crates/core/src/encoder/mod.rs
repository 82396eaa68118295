//! Tokenization, embeddings and the bidirectional transformer base encoder.

mod attention;
mod vocab;

pub use attention::{MultiHeadAttention, TransformerBlock, TransformerStack};
pub use vocab::{split_tokens, tokenize, TokenSpan, Vocabulary, CLS, PAD, SEP, UNK};

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::tensor::{Mask, Mode, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub n_segments: usize,
    pub dropout_p: f32,
    pub activation: Activation,
}

impl EncoderConfig {
    /// CPU-sized default: 64-wide, 4 heads, 2 layers.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_positions: 128,
            n_segments: 2,
            dropout_p: 0.1,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must cover the 4 reserved tokens".into()));
        }
        if self.max_positions == 0 || self.n_segments == 0 || self.d_ff == 0 {
            return Err(Error::Config(
                "max_positions, n_segments and d_ff must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Closed-form parameter count of an [`Encoder`] built from this config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let embeddings = (self.vocab_size + self.max_positions + self.n_segments) * d;
        embeddings + self.n_layers * TransformerBlock::param_count(d, self.d_ff)
    }

    /// Names of fields whose values differ between two configs.
    pub fn diff(&self, other: &EncoderConfig) -> Vec<&'static str> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f { out.push(stringify!($f)); }
            )*};
        }
        cmp!(vocab_size, d_model, n_heads, n_layers, d_ff, max_positions, n_segments, dropout_p, activation);
        out
    }
}

/// Padded batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// One unpadded row: tokens and their segment ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRow {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
}

impl BatchRow {
    pub fn single(token_ids: Vec<usize>) -> Self {
        let segment_ids = vec![0; token_ids.len()];
        BatchRow {
            token_ids,
            segment_ids,
        }
    }
}

impl TokenBatch {
    /// Pads `rows` to `pad_to` (or the longest row). Positions count from 0
    /// in every row; padding gets `[PAD]`, segment 0 and position 0.
    pub fn from_rows(rows: &[BatchRow], pad_to: Option<usize>) -> Result<Self> {
        let longest = rows.iter().map(|r| r.token_ids.len()).max().unwrap_or(0);
        let seq_len = pad_to.unwrap_or(longest);
        if longest > seq_len {
            return Err(Error::Length {
                what: "batch row",
                len: longest,
                budget: seq_len,
            });
        }
        let n = rows.len() * seq_len;
        let mut b = TokenBatch {
            token_ids: vec![PAD; n],
            attention_mask: vec![false; n],
            segment_ids: vec![0; n],
            position_ids: vec![0; n],
            batch_size: rows.len(),
            seq_len,
        };
        for (r, row) in rows.iter().enumerate() {
            if row.segment_ids.len() != row.token_ids.len() {
                return Err(Error::contract("segment ids must align with tokens"));
            }
            for (t, (&tok, &seg)) in row.token_ids.iter().zip(&row.segment_ids).enumerate() {
                let i = r * seq_len + t;
                b.token_ids[i] = tok;
                b.attention_mask[i] = true;
                b.segment_ids[i] = seg;
                b.position_ids[i] = t;
            }
        }
        Ok(b)
    }

    pub fn from_sequences(seqs: &[Vec<usize>], pad_to: Option<usize>) -> Result<Self> {
        let rows: Vec<BatchRow> = seqs.iter().map(|s| BatchRow::single(s.clone())).collect();
        Self::from_rows(&rows, pad_to)
    }

    pub fn mask(&self) -> Mask {
        Mask::new(self.attention_mask.clone(), &[self.batch_size, self.seq_len])
            .expect("batch mask shape")
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.attention_mask
            .chunks(self.seq_len.max(1))
            .take(self.batch_size)
            .map(|row| row.iter().filter(|&&m| m).count())
            .collect()
    }
}

/// Embedding tables plus a transformer stack; parameters live in the
/// caller's [`ParamStore`] under `prefix`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub segment_embedding: ParamId,
    pub stack: TransformerStack,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = store.randn(format!("{prefix}/token_embedding"), &[config.vocab_size, d], 1.0, rng)?;
        let position_embedding = store.add(
            format!("{prefix}/position_embedding"),
            sinusoid_table(config.max_positions, d),
            &[config.max_positions, d],
        )?;
        let segment_embedding =
            store.randn(format!("{prefix}/segment_embedding"), &[config.n_segments, d], 1.0, rng)?;
        let stack = TransformerStack::new(
            store,
            &format!("{prefix}/layers"),
            config.n_layers,
            d,
            config.n_heads,
            config.d_ff,
            config.activation,
            config.dropout_p,
            rng,
        )?;
        Ok(Encoder {
            config: config.clone(),
            token_embedding,
            position_embedding,
            segment_embedding,
            stack,
        })
    }

    /// Embedding sum of a batch, `[B, T, d]`.
    pub fn embed(&self, store: &ParamStore, batch: &TokenBatch) -> Result<Tensor> {
        let d = self.config.d_model;
        let shape = [batch.batch_size, batch.seq_len, d];
        let tok = store.get(self.token_embedding).gather_rows(&batch.token_ids)?;
        let pos = store.get(self.position_embedding).gather_rows(&batch.position_ids)?;
        let seg = store.get(self.segment_embedding).gather_rows(&batch.segment_ids)?;
        tok.add(&pos)?.add(&seg)?.reshape(&shape)
    }

    /// Contextual vectors `[B, T, d]`; padding never influences real positions.
    pub fn forward(&self, store: &ParamStore, batch: &TokenBatch, mode: &mut Mode<'_>) -> Result<Tensor> {
        let x = self.embed(store, batch)?.dropout(self.config.dropout_p, mode)?;
        self.stack.forward(store, &x, &batch.mask(), mode)
    }
}

/// Sinusoidal starting values for the (trainable) position table, scaled
/// to unit variance per entry.
fn sinusoid_table(n: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * d];
    for p in 0..n {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = p as f64 * freq;
            let v = if i % 2 == 0 { a.sin() } else { a.cos() };
            out[p * d + i] = (v * std::f64::consts::SQRT_2) as f32;
        }
    }
    out
}

/// Stand-alone base encoder with its own parameter store.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub store: ParamStore,
    pub encoder: Encoder,
}

pub const ENCODER_KIND: &str = "encoder";

impl EncoderModel {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", config, &mut rng)?;
        Ok(EncoderModel { store, encoder })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn encode(&self, batch: &TokenBatch, mode: &mut Mode<'_>) -> Result<Tensor> {
        self.encoder.forward(&self.store, batch, mode)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let config = serde_json::to_value(self.config()).expect("config serializes");
        checkpoint::save(path, ENCODER_KIND, config, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let config: EncoderConfig = ckpt.config_as(ENCODER_KIND)?;
        let mut model = EncoderModel::new(&config, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }

    /// Loads, failing unless the stored config equals `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &EncoderConfig) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let config: EncoderConfig = ckpt.config_as(ENCODER_KIND)?;
        let diff = config.diff(expected);
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!(
                "config mismatch in fields [{}]; checkpoint has {:?}, expected {:?}",
                diff.join(", "),
                config,
                expected
            )));
        }
        let mut model = EncoderModel::new(&config, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }
}
