use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Adam, Mode};

use super::{answer_metrics, batch_span_loss, decode_beam, decode_greedy, EncodedQA, QaMetrics, Span, SpanModel, SpanPrediction};

/// Optimisation schedule. Parsed from flat `key=value` files; a `preset`
/// line seeds every field before the other keys override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: String,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub max_sentence_len: usize,
    pub max_question_len: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Stop once training-set EM reaches this value (checked every epoch).
    pub stop_at_train_em: Option<f64>,
}

impl TrainConfig {
    pub const PRESETS: [&'static str; 5] = [
        "paper-sentence-s",
        "paper-sentence-p",
        "paper-paragraph-s",
        "paper-paragraph-p",
        "desk",
    ];

    pub fn preset(name: &str) -> Result<Self> {
        let base = |epochs, lr, batch_size, max_sentence_len, max_question_len, max_seq_len| TrainConfig {
            preset: name.to_string(),
            epochs,
            lr,
            batch_size,
            max_sentence_len,
            max_question_len,
            max_seq_len,
            seed: 0,
            stop_at_train_em: None,
        };
        Ok(match name {
            "paper-sentence-s" => base(64, 1e-4, 72, 128, 24, 128),
            "paper-sentence-p" => base(4, 5e-5, 32, 128, 24, 128),
            "paper-paragraph-s" => base(32, 1e-4, 8, 384, 64, 384),
            "paper-paragraph-p" => base(4, 5e-5, 16, 384, 64, 384),
            "desk" => base(300, 1e-3, 16, 128, 24, 128),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?}; expected one of {}",
                    Self::PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = pairs
            .iter()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_str())
            .unwrap_or("desk");
        let mut cfg = Self::preset(preset)?;
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{k}: cannot parse {v:?}")))
        }
        match key {
            "preset" => {}
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_sentence_len" => self.max_sentence_len = num(key, value)?,
            "max_question_len" => self.max_question_len = num(key, value)?,
            "max_seq_len" => self.max_seq_len = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "stop_at_train_em" => {
                self.stop_at_train_em = match value {
                    "" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let stop = self.stop_at_train_em.map_or("none".to_string(), |v| v.to_string());
        format!(
            "preset={}\nepochs={}\nlr={}\nbatch_size={}\nmax_sentence_len={}\nmax_question_len={}\nmax_seq_len={}\nseed={}\nstop_at_train_em={stop}\n",
            self.preset,
            self.epochs,
            self.lr,
            self.batch_size,
            self.max_sentence_len,
            self.max_question_len,
            self.max_seq_len,
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train: Option<QaMetrics>,
    pub dev: Option<QaMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub final_train: QaMetrics,
    pub final_dev: Option<QaMetrics>,
}

/// Mini-batch Adam on the span loss. Bit-reproducible for a fixed
/// `cfg.seed` and data order.
pub fn train_qa<M: SpanModel>(model: &mut M, train: &[EncodedQA], dev: Option<&[EncodedQA]>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    for ex in train.iter().chain(dev.unwrap_or(&[])) {
        if ex.sentence.len() > cfg.max_sentence_len {
            return Err(Error::Length {
                what: "sentence",
                len: ex.sentence.len(),
                budget: cfg.max_sentence_len,
            });
        }
        if ex.question.len() > cfg.max_question_len {
            return Err(Error::Length {
                what: "question",
                len: ex.question.len(),
                budget: cfg.max_question_len,
            });
        }
        model.check_lengths(ex)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedQA> = chunk.iter().map(|&i| &train[i]).collect();
            let golds: Vec<&[Span]> = batch.iter().map(|e| e.answers.as_slice()).collect();
            let loss = {
                let logits = model.span_logits(&batch, &mut Mode::Train(&mut rng))?;
                batch_span_loss(&logits, &golds)?
            };
            loss.backward()?;
            total += loss.item()? as f64 * batch.len() as f64;
            drop(loss);
            opt.step_store(model.store_mut())?;
            steps += 1;
        }
        let train_m = match cfg.stop_at_train_em {
            Some(_) => Some(evaluate(model, train)?),
            None => None,
        };
        let dev_m = dev.map(|d| evaluate(model, d)).transpose()?;
        records.push(EpochRecord {
            epoch,
            loss: total / train.len() as f64,
            train: train_m,
            dev: dev_m,
        });
        if let (Some(target), Some(m)) = (cfg.stop_at_train_em, train_m) {
            if m.em >= target {
                break;
            }
        }
    }
    let final_train = match records.last().and_then(|r| r.train) {
        Some(m) => m,
        None => evaluate(model, train)?,
    };
    let final_dev = records.last().and_then(|r| r.dev);
    Ok(TrainReport {
        epochs: records,
        steps,
        final_train,
        final_dev,
    })
}

const EVAL_BATCH: usize = 64;

/// Best span per example, via beam search when the model asks for it.
pub fn predict<M: SpanModel>(model: &M, data: &[EncodedQA]) -> Result<Vec<SpanPrediction>> {
    no_grad(|| {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(EVAL_BATCH) {
            let batch: Vec<&EncodedQA> = chunk.iter().collect();
            let logits = model.span_logits(&batch, &mut Mode::Infer)?;
            for b in 0..batch.len() {
                let (s, e) = logits.row(b);
                let p = if model.beam_width() > 1 {
                    decode_beam(&s, &e, model.beam_width(), model.max_answer_length()).first().copied()
                } else {
                    decode_greedy(&s, &e, model.max_answer_length())
                };
                out.push(p.ok_or_else(|| Error::contract("no valid span to decode"))?);
            }
        }
        Ok(out)
    })
}

pub fn evaluate<M: SpanModel>(model: &M, data: &[EncodedQA]) -> Result<QaMetrics> {
    let preds = predict(model, data)?;
    Ok(QaMetrics::from_pairs(
        data.iter()
            .zip(&preds)
            .map(|(ex, p)| answer_metrics(&ex.sentence, p.span(), &ex.answers)),
    ))
}
