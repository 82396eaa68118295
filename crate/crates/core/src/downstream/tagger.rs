use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{inject_features, FeatureMode, HeadTrainConfig};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::squase::SQuaseModel;
use crate::srl_eval::{LabeledSpan, Prf};
use crate::tensor::{no_grad, Adam, ParamId, ParamStore, Tensor};

/// Single-direction LSTM; gates ordered input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub gates: Linear,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Lstm {
            gates: Linear::new(store, &format!("{name}/gates"), in_dim + hidden, 4 * hidden, rng)?,
            hidden,
        })
    }

    /// `[B, T, d] → [B, T, hidden]`, left to right. Padding sits at the end
    /// of each row so it never reaches a real position.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hd = self.hidden;
        let mut h = Tensor::zeros(&[b, hd]);
        let mut c = Tensor::zeros(&[b, hd]);
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let xt = x.slice(1, step..step + 1)?.reshape(&[b, d])?;
            let z = self.gates.forward(store, &Tensor::concat(&[&xt, &h], 1)?)?;
            let i = z.slice(1, 0..hd)?.sigmoid();
            let f = z.slice(1, hd..2 * hd)?.sigmoid();
            let g = z.slice(1, 2 * hd..3 * hd)?.tanh();
            let o = z.slice(1, 3 * hd..4 * hd)?.sigmoid();
            c = f.mul(&c)?.add(&i.mul(&g)?)?;
            h = o.mul(&c.tanh())?;
            outs.push(h.reshape(&[b, 1, hd])?);
        }
        if outs.is_empty() {
            return Ok(Tensor::zeros(&[b, 0, hd]));
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        Tensor::concat(&refs, 1)
    }
}

/// Flat row permutation reversing each sequence within its own length.
fn reversal(lengths: &[usize], width: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(lengths.len() * width);
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..width {
            idx.push(b * width + if t < len { len - 1 - t } else { t });
        }
    }
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub vocab_size: usize,
    pub word_dim: usize,
    /// Width of injected encoder features; 0 for a words-only tagger.
    pub feature_dim: usize,
    pub mode: FeatureMode,
    pub hidden: usize,
    pub n_tags: usize,
}

impl TaggerConfig {
    pub fn input_width(&self) -> usize {
        if self.feature_dim == 0 {
            self.word_dim
        } else {
            self.mode.output_width(self.word_dim, self.feature_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tags == 0 || self.hidden == 0 || self.input_width() == 0 {
            return Err(Error::Config("tagger needs tags, hidden units and a non-empty input".into()));
        }
        if self.mode == FeatureMode::Replace && self.feature_dim == 0 {
            return Err(Error::Config("replace mode needs features".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TaggerInput {
    pub token_ids: Vec<usize>,
    /// `[T, feature_dim]`, absent for a words-only tagger.
    pub features: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TaggedSentence {
    pub input: TaggerInput,
    pub tags: Vec<usize>,
}

/// Word embeddings (optionally with injected features) → BiLSTM →
/// per-position linear layer over tags.
#[derive(Debug, Clone)]
pub struct BioTagger {
    pub config: TaggerConfig,
    pub store: ParamStore,
    /// Absent in replace mode, which reads features only.
    word_embedding: Option<ParamId>,
    forward_lstm: Lstm,
    backward_lstm: Lstm,
    output: Linear,
}

impl BioTagger {
    pub fn new(config: TaggerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let word_embedding = if config.feature_dim > 0 && config.mode == FeatureMode::Replace {
            None
        } else {
            Some(store.randn("tagger/word_embedding", &[config.vocab_size.max(1), config.word_dim], 1.0, &mut rng)?)
        };
        let w = config.input_width();
        let forward_lstm = Lstm::new(&mut store, "tagger/forward", w, config.hidden, &mut rng)?;
        let backward_lstm = Lstm::new(&mut store, "tagger/backward", w, config.hidden, &mut rng)?;
        let output = Linear::new(&mut store, "tagger/output", 2 * config.hidden, config.n_tags, &mut rng)?;
        Ok(BioTagger {
            config,
            store,
            word_embedding,
            forward_lstm,
            backward_lstm,
            output,
        })
    }

    fn inputs(&self, batch: &[&TaggerInput], width: usize) -> Result<Tensor> {
        let b = batch.len();
        let cfg = &self.config;
        let mut ids = Vec::with_capacity(b * width);
        for x in batch {
            if let Some(&bad) = x.token_ids.iter().find(|&&i| i >= cfg.vocab_size) {
                return Err(Error::Index {
                    what: "tagger token id",
                    index: bad,
                    bound: cfg.vocab_size,
                });
            }
            ids.extend(x.token_ids.iter().copied().chain(std::iter::repeat(0)).take(width));
        }
        let words = match self.word_embedding {
            Some(id) => self.store.get(id).gather_rows(&ids)?.reshape(&[b, width, cfg.word_dim])?,
            None => Tensor::zeros(&[b, width, 0]),
        };
        if cfg.feature_dim == 0 {
            return Ok(words);
        }
        let df = cfg.feature_dim;
        let mut feats = vec![0.0f32; b * width * df];
        for (r, x) in batch.iter().enumerate() {
            let f = x
                .features
                .as_ref()
                .ok_or_else(|| Error::contract("tagger expects encoder features"))?;
            if f.shape() != [x.token_ids.len(), df] {
                return Err(Error::contract(format!(
                    "features {:?} do not match {} tokens of width {df}",
                    f.shape(),
                    x.token_ids.len()
                )));
            }
            feats[r * width * df..][..f.numel()].copy_from_slice(f.data());
        }
        inject_features(&words, &Tensor::new(feats, &[b, width, df])?, cfg.mode)
    }

    /// Tag logits `[B, T_max, n_tags]`; rows past a sentence's length are
    /// padding.
    pub fn logits(&self, batch: &[&TaggerInput]) -> Result<Tensor> {
        let lengths: Vec<usize> = batch.iter().map(|x| x.token_ids.len()).collect();
        let width = lengths.iter().copied().max().unwrap_or(0);
        let b = batch.len();
        if width == 0 {
            return Ok(Tensor::zeros(&[b, 0, self.config.n_tags]));
        }
        let x = self.inputs(batch, width)?;
        let d = x.shape()[2];
        let rev = reversal(&lengths, width);
        let fwd = self.forward_lstm.forward(&self.store, &x)?;
        let x_rev = x.reshape(&[b * width, d])?.gather_rows(&rev)?.reshape(&[b, width, d])?;
        let hd = self.config.hidden;
        let bwd = self
            .backward_lstm
            .forward(&self.store, &x_rev)?
            .reshape(&[b * width, hd])?
            .gather_rows(&rev)?
            .reshape(&[b, width, hd])?;
        self.output.forward(&self.store, &Tensor::concat(&[&fwd, &bwd], 2)?)
    }

    /// Per-position tag distribution `[T, n_tags]` for one sentence.
    pub fn tag_distribution(&self, input: &TaggerInput) -> Result<Tensor> {
        no_grad(|| {
            let t = input.token_ids.len();
            self.logits(&[input])?.reshape(&[t, self.config.n_tags])?.softmax(1)
        })
    }

    pub fn loss(&self, batch: &[&TaggedSentence]) -> Result<Tensor> {
        let inputs: Vec<&TaggerInput> = batch.iter().map(|s| &s.input).collect();
        let logits = self.logits(&inputs)?;
        let width = logits.shape()[1];
        let mut targets = Vec::with_capacity(batch.len() * width);
        for s in batch {
            if s.tags.len() != s.input.token_ids.len() {
                return Err(Error::contract("one tag per token"));
            }
            targets.extend((0..width).map(|t| s.tags.get(t).copied()));
        }
        logits
            .reshape(&[batch.len() * width, self.config.n_tags])?
            .cross_entropy_rows(&targets)
    }

    /// Arg-max tag ids per position.
    pub fn predict(&self, input: &TaggerInput) -> Result<Vec<usize>> {
        let dist = self.tag_distribution(input)?;
        let n = self.config.n_tags;
        Ok(dist
            .data()
            .chunks(n)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Mean loss per epoch.
pub fn train_tagger(tagger: &mut BioTagger, data: &[TaggedSentence], cfg: &HeadTrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let data: Vec<&TaggedSentence> = data.iter().filter(|s| !s.tags.is_empty()).collect();
    if data.is_empty() {
        return Err(Error::contract("no non-empty tagging examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0f64;
        for batch in cfg.batches(data.len(), &mut rng) {
            let items: Vec<&TaggedSentence> = batch.iter().map(|&i| data[i]).collect();
            let loss = tagger.loss(&items)?;
            loss.backward()?;
            total += loss.item()? as f64 * items.len() as f64;
            drop(loss);
            opt.step_store(&mut tagger.store)?;
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

/// Promotes `I-X` to `B-X` wherever the previous tag is not `B-X`/`I-X`.
pub fn repair_bio<S: AsRef<str>>(tags: &[S]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(tags.len());
    for tag in tags {
        let tag = tag.as_ref();
        let fixed = match tag.strip_prefix("I-") {
            Some(ty) => {
                let continues = out
                    .last()
                    .and_then(|p| p.get(2..).filter(|_| p.starts_with("B-") || p.starts_with("I-")))
                    == Some(ty);
                if continues {
                    tag.to_string()
                } else {
                    format!("B-{ty}")
                }
            }
            None => tag.to_string(),
        };
        out.push(fixed);
    }
    out
}

/// Labelled spans of a BIO sequence, after repair.
pub fn bio_spans<S: AsRef<str>>(tags: &[S]) -> Vec<LabeledSpan> {
    let tags = repair_bio(tags);
    let mut spans = Vec::new();
    let mut open: Option<LabeledSpan> = None;
    for (i, tag) in tags.iter().enumerate() {
        if let Some(ty) = tag.strip_prefix("B-") {
            spans.extend(open.take());
            open = Some(LabeledSpan {
                start: i,
                end: i + 1,
                label: ty.to_string(),
            });
        } else if tag.starts_with("I-") {
            if let Some(s) = open.as_mut() {
                s.end = i + 1;
            }
        } else {
            spans.extend(open.take());
        }
    }
    spans.extend(open);
    spans
}

/// Micro-averaged exact labelled span P/R/F1 over sentences.
pub fn labeled_span_prf(pred: &[Vec<LabeledSpan>], gold: &[Vec<LabeledSpan>]) -> Prf {
    let (mut np, mut ng, mut hit) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        np += p.len();
        ng += g.len();
        hit += p.iter().filter(|s| g.contains(s)).count();
    }
    Prf::from_counts(hit, np, hit, ng)
}

pub fn tagger_span_f1(tagger: &BioTagger, data: &[TaggedSentence], tag_names: &[String]) -> Result<Prf> {
    let mut pred = Vec::with_capacity(data.len());
    let mut gold = Vec::with_capacity(data.len());
    for s in data {
        let p = tagger.predict(&s.input)?;
        pred.push(bio_spans(&p.iter().map(|&i| tag_names[i].as_str()).collect::<Vec<_>>()));
        gold.push(bio_spans(&s.tags.iter().map(|&i| tag_names[i].as_str()).collect::<Vec<_>>()));
    }
    Ok(labeled_span_prf(&pred, &gold))
}

/// Frozen h(S) for each sentence, `[T, d]`, computed in parallel.
pub fn sentence_features(model: &SQuaseModel, sentences: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    sentences
        .par_iter()
        .map(|s| {
            if s.is_empty() {
                Ok(Tensor::zeros(&[0, model.config.encoder.d_model]))
            } else {
                Ok(model.encode_sentence(s)?.vectors)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(feature_dim: usize, mode: FeatureMode) -> TaggerConfig {
        TaggerConfig {
            vocab_size: 10,
            word_dim: 4,
            feature_dim,
            mode,
            hidden: 5,
            n_tags: 3,
        }
    }

    fn input(ids: &[usize]) -> TaggerInput {
        TaggerInput {
            token_ids: ids.to_vec(),
            features: None,
        }
    }

    #[test]
    fn empty_sentence_gives_empty_output() {
        let t = BioTagger::new(cfg(0, FeatureMode::Concatenate), 0).unwrap();
        let d = t.tag_distribution(&input(&[])).unwrap();
        assert_eq!(d.shape(), &[0, 3]);
        assert!(t.predict(&input(&[])).unwrap().is_empty());
    }

    #[test]
    fn distribution_rows_sum_to_one() {
        let t = BioTagger::new(cfg(0, FeatureMode::Concatenate), 1).unwrap();
        let d = t.tag_distribution(&input(&[1, 2, 3, 4])).unwrap();
        for row in d.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let t = BioTagger::new(cfg(0, FeatureMode::Concatenate), 2).unwrap();
        let a = input(&[1, 2, 3]);
        let b = input(&[4, 5, 6, 7, 8, 9]);
        let alone = t.logits(&[&a]).unwrap();
        let padded = t.logits(&[&a, &b]).unwrap();
        for (x, y) in alone.data().iter().zip(&padded.data()[..9]) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn backward_direction_sees_the_future() {
        let t = BioTagger::new(cfg(0, FeatureMode::Concatenate), 3).unwrap();
        let a = t.logits(&[&input(&[1, 2, 3])]).unwrap();
        let b = t.logits(&[&input(&[1, 2, 9])]).unwrap();
        assert_ne!(&a.data()[..3], &b.data()[..3]);
    }

    #[test]
    fn repair_promotes_orphan_inside_tags() {
        let fixed = repair_bio(&["O", "I-A", "I-A", "B-B", "I-A", "I-B"]);
        assert_eq!(fixed, ["O", "B-A", "I-A", "B-B", "B-A", "B-B"]);
    }

    #[test]
    fn spans_from_bio() {
        let s = bio_spans(&["B-A", "I-A", "O", "I-B", "B-A"]);
        let want = [(0, 2, "A"), (3, 4, "B"), (4, 5, "A")];
        assert_eq!(s.len(), 3);
        for (got, (a, b, l)) in s.iter().zip(want) {
            assert_eq!((got.start, got.end, got.label.as_str()), (a, b, l));
        }
    }

    #[test]
    fn labelled_f1_needs_matching_label() {
        let g = vec![vec![LabeledSpan { start: 0, end: 2, label: "A".into() }]];
        let p = vec![vec![LabeledSpan { start: 0, end: 2, label: "B".into() }]];
        assert_eq!(labeled_span_prf(&p, &g).f1, 0.0);
        assert_eq!(labeled_span_prf(&g, &g).f1, 1.0);
    }

    #[test]
    fn tagger_learns_a_token_rule() {
        // tag 1 wherever token 5 appears, 2 right after it, else 0
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<TaggedSentence> = (0..24)
            .map(|_| {
                let ids: Vec<usize> = (0..6).map(|_| rng.gen_range(1..10)).collect();
                let tags = (0..6)
                    .map(|i| match (ids[i], i.checked_sub(1).map(|j| ids[j])) {
                        (5, _) => 1,
                        (_, Some(5)) => 2,
                        _ => 0,
                    })
                    .collect();
                TaggedSentence { input: input(&ids), tags }
            })
            .collect();
        let mut t = BioTagger::new(cfg(0, FeatureMode::Concatenate), 5).unwrap();
        let hc = HeadTrainConfig {
            epochs: 60,
            lr: 2e-2,
            batch_size: 8,
            seed: 0,
        };
        let losses = train_tagger(&mut t, &data, &hc).unwrap();
        assert!(losses.last().unwrap() < &(losses[0] * 0.2), "{losses:?}");
    }
}
