//! Consumers of the trained encoders: feature injection into a BiLSTM
//! tagger, a pooled-pair classifier, and an edge probe over frozen
//! encodings.

mod pair;
mod probe;
mod tagger;

pub use pair::{train_pair_classifier, PairClassifier, PairExample, PairReport};
pub use probe::{probe_accuracy, probe_examples_from_tagging, train_edge_probe, EdgeProbe, ProbeExample, ProbeItem};
pub use tagger::{
    bio_spans, labeled_span_prf, repair_bio, sentence_features, tagger_span_f1, train_tagger, BioTagger,
    Lstm, TaggedSentence, TaggerConfig, TaggerInput,
};

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data_io::{read_jsonl, TaggingExample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Concatenate,
    Replace,
}

impl FromStr for FeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concatenate" | "concat" => Ok(FeatureMode::Concatenate),
            "replace" => Ok(FeatureMode::Replace),
            _ => Err(Error::Config(format!("unknown feature mode {s:?}"))),
        }
    }
}

impl FeatureMode {
    pub fn output_width(self, word_dim: usize, feature_dim: usize) -> usize {
        match self {
            FeatureMode::Concatenate => word_dim + feature_dim,
            FeatureMode::Replace => feature_dim,
        }
    }
}

/// Per-position `[word ; features]` or `features` alone. Both inputs are
/// `[..., T, d]` with matching leading axes.
pub fn inject_features(word_embeddings: &Tensor, features: &Tensor, mode: FeatureMode) -> Result<Tensor> {
    let (ws, fs) = (word_embeddings.shape(), features.shape());
    if ws.len() != fs.len() || ws.len() < 2 || ws[..ws.len() - 1] != fs[..fs.len() - 1] {
        return Err(Error::contract(format!(
            "feature positions {fs:?} do not line up with word embeddings {ws:?}"
        )));
    }
    match mode {
        FeatureMode::Concatenate => Tensor::concat(&[word_embeddings, features], ws.len() - 1),
        FeatureMode::Replace => Ok(features.clone()),
    }
}

/// Closed label inventory; ids follow insertion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        let mut out = LabelSet { names: Vec::new() };
        for n in names {
            let n = n.into();
            if out.id(&n).is_none() {
                out.names.push(n);
            }
        }
        out
    }

    /// `O` first, then every tag seen, sorted.
    pub fn for_tags(examples: &[TaggingExample]) -> Self {
        let mut seen: Vec<&str> = examples.iter().flat_map(|e| e.tags.iter().map(String::as_str)).collect();
        seen.sort_unstable();
        seen.dedup();
        LabelSet::new(std::iter::once("O").chain(seen))
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.id(name)
            .ok_or_else(|| Error::contract(format!("label {name:?} is not in the label set")))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Optimiser settings shared by the downstream heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            epochs: 30,
            lr: 1e-2,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl HeadTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn batches<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

fn parse_err(path: &Path, line: usize, message: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    }
}

/// `{tokens, tags}` per line; token and tag counts must agree.
pub fn read_tagging_jsonl(path: impl AsRef<Path>) -> Result<Vec<TaggingExample>> {
    let path = path.as_ref();
    let rows: Vec<TaggingExample> = read_jsonl(path)?;
    for (i, r) in rows.iter().enumerate() {
        if r.tokens.len() != r.tags.len() {
            return Err(parse_err(
                path,
                i + 1,
                format!("{} tokens but {} tags", r.tokens.len(), r.tags.len()),
            ));
        }
    }
    Ok(rows)
}

/// `{tokens, span1, span2, label}` per line; spans must be non-empty and
/// in bounds.
pub fn read_probe_jsonl(path: impl AsRef<Path>) -> Result<Vec<ProbeExample>> {
    let path = path.as_ref();
    let rows: Vec<ProbeExample> = read_jsonl(path)?;
    for (i, r) in rows.iter().enumerate() {
        for s in [r.span1, r.span2] {
            if s[0] >= s[1] || s[1] > r.tokens.len() {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("span {s:?} invalid for {} tokens", r.tokens.len()),
                ));
            }
        }
    }
    Ok(rows)
}
