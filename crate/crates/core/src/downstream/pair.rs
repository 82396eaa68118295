use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HeadTrainConfig;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::pquase::PQuaseModel;
use crate::span_qa::SpanModel;
use crate::tensor::{no_grad, Adam, Mode, ParamStore, Tensor};

/// One linear layer + softmax over the pooled `[2d]` pair vector.
#[derive(Debug, Clone)]
pub struct PairClassifier {
    pub store: ParamStore,
    pub linear: Linear,
    pub n_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

impl PairClassifier {
    pub fn new(pooled_dim: usize, n_labels: usize, seed: u64) -> Result<Self> {
        if n_labels == 0 {
            return Err(Error::Config("pair classifier needs at least one label".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let linear = Linear::new(&mut store, "pair/output", pooled_dim, n_labels, &mut rng)?;
        Ok(PairClassifier { store, linear, n_labels })
    }

    /// `[B, 2d] → [B, n_labels]` logits.
    pub fn logits(&self, pooled: &Tensor) -> Result<Tensor> {
        self.linear.forward(&self.store, pooled)
    }

    pub fn distribution(&self, pooled: &Tensor) -> Result<Tensor> {
        no_grad(|| self.logits(pooled)?.softmax(1))
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0
}

fn pooled(encoder: &PQuaseModel, data: &[&PairExample], mode: &mut Mode<'_>) -> Result<Tensor> {
    let s: Vec<&[usize]> = data.iter().map(|e| e.first.as_slice()).collect();
    let q: Vec<&[usize]> = data.iter().map(|e| e.second.as_slice()).collect();
    encoder.pooled_batch(&s, &q, mode)
}

/// Trains the classifier on pooled p-QuASE pair vectors, updating the
/// encoder too unless `freeze_encoder`.
pub fn train_pair_classifier(
    encoder: &mut PQuaseModel,
    clf: &mut PairClassifier,
    data: &[PairExample],
    cfg: &HeadTrainConfig,
    freeze_encoder: bool,
) -> Result<PairReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("no pair examples"));
    }
    if let Some(bad) = data.iter().find(|e| e.label >= clf.n_labels) {
        return Err(Error::Index {
            what: "pair label",
            index: bad.label,
            bound: clf.n_labels,
        });
    }
    // the span head gets no gradient through the pooled path
    let head_trainable = {
        let store = encoder.store();
        store.find("span_head/w").is_some_and(|id| store.is_trainable(id))
    };
    encoder.store_mut().set_trainable("span_head", false);
    let result = run_pair_epochs(encoder, clf, data, cfg, freeze_encoder);
    encoder.store_mut().set_trainable("span_head", head_trainable);
    let losses = result?;
    let train_accuracy = pair_accuracy(encoder, clf, data)?;
    Ok(PairReport { losses, train_accuracy })
}

fn run_pair_epochs(
    encoder: &mut PQuaseModel,
    clf: &mut PairClassifier,
    data: &[PairExample],
    cfg: &HeadTrainConfig,
    freeze_encoder: bool,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head_opt = Adam::new(cfg.lr);
    let mut enc_opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0f64;
        for batch in cfg.batches(data.len(), &mut rng) {
            let items: Vec<&PairExample> = batch.iter().map(|&i| &data[i]).collect();
            let features = if freeze_encoder {
                no_grad(|| pooled(encoder, &items, &mut Mode::Infer))?
            } else {
                pooled(encoder, &items, &mut Mode::Train(&mut rng))?
            };
            let targets: Vec<Option<usize>> = items.iter().map(|e| Some(e.label)).collect();
            let loss = clf.logits(&features)?.cross_entropy_rows(&targets)?;
            loss.backward()?;
            total += loss.item()? as f64 * items.len() as f64;
            drop((loss, features));
            head_opt.step_store(&mut clf.store)?;
            if !freeze_encoder {
                enc_opt.step_store(encoder.store_mut())?;
            }
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

pub fn pair_accuracy(encoder: &PQuaseModel, clf: &PairClassifier, data: &[PairExample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let items: Vec<&PairExample> = data.iter().collect();
    let dist = no_grad(|| clf.distribution(&pooled(encoder, &items, &mut Mode::Infer)?))?;
    let hits = dist
        .data()
        .chunks(clf.n_labels)
        .zip(data)
        .filter(|(row, e)| argmax(row) == e.label)
        .count();
    Ok(hits as f64 / data.len() as f64)
}
