use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HeadTrainConfig, LabelSet};
use crate::data_io::TaggingExample;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::tensor::{no_grad, Adam, Mask, ParamStore, Tensor};

/// JSON-lines record: ordered span pair with its directed relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeExample {
    pub tokens: Vec<String>,
    pub span1: [usize; 2],
    pub span2: [usize; 2],
    pub label: String,
}

/// A probe example with its frozen encoding `[T, d]` attached.
#[derive(Debug, Clone)]
pub struct ProbeItem {
    pub encoding: Tensor,
    pub span1: Range<usize>,
    pub span2: Range<usize>,
    pub label: usize,
}

/// Mean-pooled spans, concatenated in order, through a tanh two-layer
/// perceptron.
#[derive(Debug, Clone)]
pub struct EdgeProbe {
    pub store: ParamStore,
    pub mlp: Mlp,
    pub d_model: usize,
    pub n_relations: usize,
}

impl EdgeProbe {
    pub fn new(d_model: usize, hidden: usize, n_relations: usize, seed: u64) -> Result<Self> {
        if n_relations == 0 || d_model == 0 || hidden == 0 {
            return Err(Error::Config("edge probe dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "probe", 2 * d_model, hidden, n_relations, Activation::Tanh, &mut rng)?;
        Ok(EdgeProbe {
            store,
            mlp,
            d_model,
            n_relations,
        })
    }

    /// Mean over the rows of `encoding` in `span`, `[1, d]`.
    pub fn pool_span(encoding: &Tensor, span: Range<usize>) -> Result<Tensor> {
        if span.is_empty() {
            return Err(Error::DegenerateSlice { op: "edge_probe span" });
        }
        let t = encoding.shape()[0];
        if span.end > t {
            return Err(Error::Index {
                what: "edge_probe span end",
                index: span.end,
                bound: t,
            });
        }
        let d = encoding.shape()[1];
        let n = span.len();
        encoding
            .slice(0, span)?
            .reshape(&[1, n, d])?
            .mean_pool_over_time(&Mask::all(&[1, n]))
    }

    /// `[span1 ; span2]` input vector, `[1, 2d]`.
    pub fn pair_vector(&self, encoding: &Tensor, span1: Range<usize>, span2: Range<usize>) -> Result<Tensor> {
        if encoding.rank() != 2 || encoding.shape()[1] != self.d_model {
            return Err(Error::Dimension {
                op: "edge_probe",
                lhs: encoding.shape().to_vec(),
                rhs: vec![self.d_model],
            });
        }
        Tensor::concat(&[&Self::pool_span(encoding, span1)?, &Self::pool_span(encoding, span2)?], 1)
    }

    /// Relation logits `[B, n_relations]`.
    pub fn logits(&self, items: &[&ProbeItem]) -> Result<Tensor> {
        let rows = items
            .iter()
            .map(|it| self.pair_vector(&it.encoding, it.span1.clone(), it.span2.clone()))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        self.mlp.forward(&self.store, &Tensor::concat(&refs, 0)?)
    }

    pub fn relation_distribution(&self, encoding: &Tensor, span1: Range<usize>, span2: Range<usize>) -> Result<Tensor> {
        no_grad(|| {
            self.mlp
                .forward(&self.store, &self.pair_vector(encoding, span1, span2)?)?
                .reshape(&[self.n_relations])?
                .softmax(0)
        })
    }

    /// Multi-class softmax cross-entropy, averaged over the batch.
    pub fn loss(&self, items: &[&ProbeItem]) -> Result<Tensor> {
        let targets: Vec<Option<usize>> = items.iter().map(|it| Some(it.label)).collect();
        self.logits(items)?.cross_entropy_rows(&targets)
    }
}

pub fn train_edge_probe(probe: &mut EdgeProbe, data: &[ProbeItem], cfg: &HeadTrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("no probe examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0f64;
        for batch in cfg.batches(data.len(), &mut rng) {
            let items: Vec<&ProbeItem> = batch.iter().map(|&i| &data[i]).collect();
            let loss = probe.loss(&items)?;
            loss.backward()?;
            total += loss.item()? as f64 * items.len() as f64;
            drop(loss);
            opt.step_store(&mut probe.store)?;
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

pub fn probe_accuracy(probe: &EdgeProbe, data: &[ProbeItem]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let items: Vec<&ProbeItem> = data.iter().collect();
    let logits = no_grad(|| probe.logits(&items))?;
    let hits = logits
        .data()
        .chunks(probe.n_relations)
        .zip(data)
        .filter(|(row, it)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            best == it.label
        })
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Every ordered pair of labelled spans in each sentence, with relation
/// `"<label1>-<label2>"`. Returns the examples and their label set.
pub fn probe_examples_from_tagging(tagging: &[TaggingExample]) -> (Vec<ProbeExample>, LabelSet) {
    let mut out = Vec::new();
    for ex in tagging {
        let spans = super::bio_spans(&ex.tags);
        for a in &spans {
            for b in &spans {
                if a == b {
                    continue;
                }
                out.push(ProbeExample {
                    tokens: ex.tokens.clone(),
                    span1: [a.start, a.end],
                    span2: [b.start, b.end],
                    label: format!("{}-{}", a.label, b.label),
                });
            }
        }
    }
    let mut names: Vec<&str> = out.iter().map(|e| e.label.as_str()).collect();
    names.sort_unstable();
    let labels = LabelSet::new(names);
    (out, labels)
}
