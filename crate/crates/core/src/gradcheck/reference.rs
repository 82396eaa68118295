//! Plain `f64` re-implementations of the tensor ops, used only as the
//! numeric side of gradient checks. Every function is a direct loop over
//! the definition with no shared kernels.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::tensor::{Mask, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = i % shape[a];
        i /= shape[a];
    }
    idx
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl Arr {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Arr> {
        if data.len() != numel(shape) {
            return Err(mismatch("reference", &[data.len()], shape));
        }
        Ok(Arr {
            data,
            shape: shape.to_vec(),
        })
    }

    pub fn from_tensor(t: &Tensor) -> Arr {
        Arr {
            data: t.data().iter().map(|&v| v as f64).collect(),
            shape: t.shape().to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Arr {
        Arr { data: vec![v], shape: vec![] }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dot(&self, w: &[f32]) -> f64 {
        self.data.iter().zip(w).map(|(&a, &b)| a * b as f64).sum()
    }

    pub fn matmul(&self, b: &Arr) -> Result<Arr> {
        let (sa, sb) = (&self.shape, &b.shape);
        let (ra, rb) = (sa.len(), sb.len());
        if ra < 2 || rb < 2 || sa[ra - 1] != sb[rb - 2] {
            return Err(mismatch("reference matmul", sa, sb));
        }
        let (m, k, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 1]);
        let batch = numel(&sa[..ra - 2]);
        let shared_rhs = rb == 2;
        if !shared_rhs && sa[..ra - 2] != sb[..rb - 2] {
            return Err(mismatch("reference matmul", sa, sb));
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a0 = bi * m * k;
            let b0 = if shared_rhs { 0 } else { bi * k * n };
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += self.data[a0 + i * k + p] * b.data[b0 + p * n + j];
                    }
                    out[bi * m * n + i * n + j] = s;
                }
            }
        }
        let mut shape = sa[..ra - 1].to_vec();
        shape.push(n);
        Arr::new(out, &shape)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Arr> {
        if perm.len() != self.rank() {
            return Err(mismatch("reference permute", &self.shape, perm));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src = strides(&self.shape);
        let data = (0..self.data.len())
            .map(|i| {
                let idx = unravel(i, &shape);
                let at: usize = idx.iter().zip(perm).map(|(&x, &p)| x * src[p]).sum();
                self.data[at]
            })
            .collect();
        Arr::new(data, &shape)
    }

    pub fn transpose_last(&self) -> Result<Arr> {
        let r = self.rank();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Arr> {
        Arr::new(self.data.clone(), shape)
    }

    /// Elementwise `f` with right-aligned broadcasting.
    pub fn zip(&self, o: &Arr, f: impl Fn(f64, f64) -> f64) -> Result<Arr> {
        let r = self.rank().max(o.rank());
        let pad = |s: &[usize]| {
            let mut p = vec![1; r - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (sa, sb) = (pad(&self.shape), pad(&o.shape));
        let mut shape = Vec::with_capacity(r);
        for (&x, &y) in sa.iter().zip(&sb) {
            shape.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return Err(mismatch("reference broadcast", &self.shape, &o.shape)),
            });
        }
        let (ta, tb) = (strides(&sa), strides(&sb));
        let data = (0..numel(&shape))
            .map(|i| {
                let idx = unravel(i, &shape);
                let mut ia = 0;
                let mut ib = 0;
                for a in 0..r {
                    ia += if sa[a] == 1 { 0 } else { idx[a] * ta[a] };
                    ib += if sb[a] == 1 { 0 } else { idx[a] * tb[a] };
                }
                f(self.data[ia], o.data[ib])
            })
            .collect();
        Arr::new(data, &shape)
    }

    pub fn add(&self, o: &Arr) -> Result<Arr> {
        self.zip(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Arr) -> Result<Arr> {
        self.zip(o, |a, b| a - b)
    }

    pub fn mul(&self, o: &Arr) -> Result<Arr> {
        self.zip(o, |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr {
            data: self.data.iter().map(|&v| f(v)).collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn scale(&self, c: f64) -> Arr {
        self.map(|v| v * c)
    }

    pub fn gelu(&self) -> Arr {
        let k = (2.0 / std::f64::consts::PI).sqrt();
        self.map(|x| 0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh()))
    }

    pub fn relu(&self) -> Arr {
        self.map(|x| x.max(0.0))
    }

    pub fn tanh(&self) -> Arr {
        self.map(f64::tanh)
    }

    pub fn sigmoid(&self) -> Arr {
        self.map(|x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn activate(&self, a: Activation) -> Arr {
        match a {
            Activation::Gelu => self.gelu(),
            Activation::Relu => self.relu(),
            Activation::Tanh => self.tanh(),
        }
    }

    fn split(&self, axis: usize) -> (usize, usize, usize) {
        (numel(&self.shape[..axis]), self.shape[axis], numel(&self.shape[axis + 1..]))
    }

    pub fn concat(parts: &[&Arr], axis: usize) -> Result<Arr> {
        let first = parts[0];
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let (outer, _, inner) = first.split(axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let w = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        Arr::new(data, &shape)
    }

    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Arr> {
        let (outer, n, inner) = self.split(axis);
        let mut data = Vec::new();
        for o in 0..outer {
            data.extend_from_slice(&self.data[(o * n + range.start) * inner..(o * n + range.end) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = range.len();
        Arr::new(data, &shape)
    }

    pub fn gather_rows(&self, ids: &[usize]) -> Result<Arr> {
        let w = numel(&self.shape[1..]);
        let data = ids.iter().flat_map(|&i| self.data[i * w..(i + 1) * w].iter().copied()).collect();
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(&self.shape[1..]);
        Arr::new(data, &shape)
    }

    pub fn pick(&self, idx: &[usize]) -> Arr {
        Arr {
            data: idx.iter().map(|&i| self.data[i]).collect(),
            shape: vec![idx.len()],
        }
    }

    pub fn sum(&self) -> Arr {
        Arr::scalar(self.data.iter().sum())
    }

    pub fn mean(&self) -> Arr {
        Arr::scalar(self.data.iter().sum::<f64>() / self.data.len() as f64)
    }

    pub fn min(&self) -> Arr {
        Arr::scalar(self.data.iter().copied().fold(f64::INFINITY, f64::min))
    }

    /// (Log-)softmax along `axis` over entries where `mask` is true.
    pub fn masked_softmax(&self, mask: &Mask, axis: usize, log: bool) -> Result<Arr> {
        let valid = mask.broadcast_to(&self.shape)?;
        let (outer, n, inner) = self.split(axis);
        let mut out = vec![if log { f64::NEG_INFINITY } else { 0.0 }; self.data.len()];
        for o in 0..outer {
            for q in 0..inner {
                let at = |k: usize| (o * n + k) * inner + q;
                let live: Vec<usize> = (0..n).filter(|&k| valid[at(k)]).collect();
                let z: f64 = live.iter().map(|&k| self.data[at(k)].exp()).sum();
                for &k in &live {
                    let x = self.data[at(k)];
                    out[at(k)] = if log { x - z.ln() } else { x.exp() / z };
                }
            }
        }
        Arr::new(out, &self.shape)
    }

    pub fn softmax(&self, axis: usize) -> Result<Arr> {
        self.masked_softmax(&Mask::all(&self.shape), axis, false)
    }

    pub fn layer_norm(&self, gain: &Arr, bias: &Arr, eps: f64) -> Result<Arr> {
        let d = *self.shape.last().unwrap_or(&0);
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) / (var + eps).sqrt() * gain.data[j] + bias.data[j];
            }
        }
        Arr::new(out, &self.shape)
    }

    fn pool(&self, mask: &Mask, max: bool) -> Result<Arr> {
        let r = self.rank();
        let (t, d) = (self.shape[r - 2], self.shape[r - 1]);
        let outer = numel(&self.shape[..r - 2]);
        let m = mask.data();
        let mut out = Vec::with_capacity(outer * d);
        for o in 0..outer {
            let rows: Vec<usize> = (0..t).filter(|&s| m[o * t + s]).collect();
            if rows.is_empty() {
                return Err(Error::DegenerateSlice { op: "reference pool" });
            }
            for j in 0..d {
                let vals = rows.iter().map(|&s| self.data[(o * t + s) * d + j]);
                out.push(if max {
                    vals.fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.sum::<f64>() / rows.len() as f64
                });
            }
        }
        let mut shape = self.shape[..r - 2].to_vec();
        shape.push(d);
        Arr::new(out, &shape)
    }

    pub fn mean_pool_over_time(&self, mask: &Mask) -> Result<Arr> {
        self.pool(mask, false)
    }

    pub fn max_pool_over_time(&self, mask: &Mask) -> Result<Arr> {
        self.pool(mask, true)
    }

    /// Mean of `log Σ exp(row) − row[target]` over rows with a target.
    pub fn cross_entropy_rows(&self, targets: &[Option<usize>]) -> Arr {
        let c = self.shape[1];
        let mut total = 0.0;
        let mut n = 0;
        for (row, t) in self.data.chunks(c).zip(targets) {
            if let Some(t) = t {
                total += row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[*t];
                n += 1;
            }
        }
        Arr::scalar(total / n as f64)
    }
}

pub fn linear(x: &Arr, w: &Arr, b: &Arr) -> Result<Arr> {
    x.matmul(w)?.add(b)
}

/// Parameter names of one transformer block, relative to its prefix, in the
/// order [`transformer_block`] expects them.
pub const BLOCK_PARAMS: [&str; 16] = [
    "attention/query/w",
    "attention/query/b",
    "attention/key/w",
    "attention/key/b",
    "attention/value/w",
    "attention/value/b",
    "attention/output/w",
    "attention/output/b",
    "attention_norm/gain",
    "attention_norm/bias",
    "ff_in/w",
    "ff_in/b",
    "ff_out/w",
    "ff_out/b",
    "ff_norm/gain",
    "ff_norm/bias",
];

/// Post-norm block `LN(h + FFN(h))`, `h = LN(x + MHA(x))`, inference mode.
pub fn transformer_block(x: &Arr, mask: &Mask, p: &[Arr], n_heads: usize, activation: Activation, ln_eps: f64) -> Result<Arr> {
    let (b, t, d) = (x.shape[0], x.shape[1], x.shape[2]);
    let dh = d / n_heads;
    let heads = |a: Arr| a.reshape(&[b, t, n_heads, dh])?.permute(&[0, 2, 1, 3]);
    let q = heads(linear(x, &p[0], &p[1])?)?;
    let k = heads(linear(x, &p[2], &p[3])?)?;
    let v = heads(linear(x, &p[4], &p[5])?)?;
    let scores = q.matmul(&k.transpose_last()?)?.scale(1.0 / (dh as f64).sqrt());
    let weights = scores.masked_softmax(&mask.reshape(&[b, 1, 1, t])?, 3, false)?;
    let ctx = weights.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, t, d])?;
    let attn = linear(&ctx, &p[6], &p[7])?;
    let h = x.add(&attn)?.layer_norm(&p[8], &p[9], ln_eps)?;
    let ff = linear(&linear(&h, &p[10], &p[11])?.activate(activation), &p[12], &p[13])?;
    h.add(&ff)?.layer_norm(&p[14], &p[15], ln_eps)
}

/// Similarity `w1·h_s + w2·h_q + w3·(h_s∘h_q)`, sentence-to-question
/// attention, max-over-question question-to-sentence attention, and the
/// `[h_s; c2q; h_s∘c2q; h_s∘q2s]` output.
pub fn bidaf_attention(w: &Arr, hs: &Arr, s_mask: &Mask, hq: &Arr, q_mask: &Mask) -> Result<Arr> {
    let (b, ts, d) = (hs.shape[0], hs.shape[1], hs.shape[2]);
    let tq = hq.shape[1];
    let (qm, sm) = (q_mask.data(), s_mask.data());
    let mut sim = vec![0.0; b * ts * tq];
    for bi in 0..b {
        for i in 0..ts {
            for j in 0..tq {
                let mut s = 0.0;
                for k in 0..d {
                    let (x, y) = (hs.data[(bi * ts + i) * d + k], hq.data[(bi * tq + j) * d + k]);
                    s += w.data[k] * x + w.data[d + k] * y + w.data[2 * d + k] * x * y;
                }
                sim[(bi * ts + i) * tq + j] = s;
            }
        }
    }
    let mut out = Vec::with_capacity(b * ts * 4 * d);
    for bi in 0..b {
        let row_max: Vec<f64> = (0..ts)
            .map(|i| {
                (0..tq)
                    .filter(|&j| qm[bi * tq + j])
                    .map(|j| sim[(bi * ts + i) * tq + j])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let z: f64 = (0..ts).filter(|&i| sm[bi * ts + i]).map(|i| row_max[i].exp()).sum();
        let mut q2s = vec![0.0; d];
        for i in (0..ts).filter(|&i| sm[bi * ts + i]) {
            let beta = row_max[i].exp() / z;
            for k in 0..d {
                q2s[k] += beta * hs.data[(bi * ts + i) * d + k];
            }
        }
        for i in 0..ts {
            let zq: f64 = (0..tq).filter(|&j| qm[bi * tq + j]).map(|j| sim[(bi * ts + i) * tq + j].exp()).sum();
            let mut c2q = vec![0.0; d];
            for j in (0..tq).filter(|&j| qm[bi * tq + j]) {
                let a = sim[(bi * ts + i) * tq + j].exp() / zq;
                for k in 0..d {
                    c2q[k] += a * hq.data[(bi * tq + j) * d + k];
                }
            }
            let h = &hs.data[(bi * ts + i) * d..(bi * ts + i + 1) * d];
            out.extend_from_slice(h);
            out.extend_from_slice(&c2q);
            out.extend(h.iter().zip(&c2q).map(|(x, y)| x * y));
            out.extend(h.iter().zip(&q2s).map(|(x, y)| x * y));
        }
    }
    Arr::new(out, &[b, ts, 4 * d])
}

/// Batch span loss: per example `½·(−log p_start − log p_end)` minimised over
/// golds, then averaged; softmax over each row's first `lengths[b]` entries.
pub fn span_loss(start: &Arr, end: &Arr, lengths: &[usize], golds: &[Vec<(usize, usize)>]) -> Arr {
    let t = start.shape[1];
    let log_p = |a: &Arr, row: usize, k: usize| {
        let r = &a.data[row * t..row * t + lengths[row]];
        r[k] - r.iter().map(|v| v.exp()).sum::<f64>().ln()
    };
    let total: f64 = golds
        .iter()
        .enumerate()
        .map(|(row, spans)| {
            spans
                .iter()
                .map(|&(s, e)| -0.5 * (log_p(start, row, s) + log_p(end, row, e - 1)))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Arr::scalar(total / golds.len() as f64)
}

/// Named `f64` parameter values of one model.
pub type Params = std::collections::BTreeMap<String, Arr>;

pub fn params_of(store: &crate::tensor::ParamStore) -> Params {
    store.iter().map(|(n, t)| (n.to_string(), Arr::from_tensor(t))).collect()
}

fn param<'a>(p: &'a Params, name: &str) -> Result<&'a Arr> {
    p.get(name).ok_or_else(|| Error::contract(format!("reference: no parameter {name}")))
}

fn linear_named(p: &Params, name: &str, x: &Arr) -> Result<Arr> {
    linear(x, param(p, &format!("{name}/w"))?, param(p, &format!("{name}/b"))?)
}

/// Token + position + segment embedding of one unpadded row, `[1, T, d]`.
fn embed(p: &Params, prefix: &str, tokens: &[usize], segments: &[usize]) -> Result<Arr> {
    let tok = param(p, &format!("{prefix}/token_embedding"))?.gather_rows(tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = param(p, &format!("{prefix}/position_embedding"))?.gather_rows(&positions)?;
    let seg = param(p, &format!("{prefix}/segment_embedding"))?.gather_rows(segments)?;
    let d = tok.shape[1];
    tok.add(&pos)?.add(&seg)?.reshape(&[1, tokens.len(), d])
}

/// `n_layers` blocks named `{prefix}/{i}` over one unpadded row.
fn stack(p: &Params, prefix: &str, n_layers: usize, x: Arr, enc: &crate::encoder::EncoderConfig) -> Result<Arr> {
    let mask = Mask::all(&x.shape[..2]);
    let mut h = x;
    for i in 0..n_layers {
        let block: Vec<Arr> = BLOCK_PARAMS
            .iter()
            .map(|n| param(p, &format!("{prefix}/{i}/{n}")).cloned())
            .collect::<Result<_>>()?;
        h = transformer_block(&h, &mask, &block, enc.n_heads, enc.activation, crate::nn::LayerNorm::EPS as f64)?;
    }
    Ok(h)
}

fn encode(p: &Params, prefix: &str, tokens: &[usize], segments: &[usize], enc: &crate::encoder::EncoderConfig) -> Result<Arr> {
    stack(p, &format!("{prefix}/layers"), enc.n_layers, embed(p, prefix, tokens, segments)?, enc)
}

/// Start and end logits of s-QuASE for one sentence/question pair, each
/// `[1, T_s]`, computed without padding.
pub fn squase_logits(p: &Params, c: &crate::squase::SQuaseConfig, sentence: &[usize], question: &[usize]) -> Result<(Arr, Arr)> {
    use crate::squase::InteractionKind;
    let e = &c.encoder;
    let d = e.d_model;
    let (ts, tq) = (sentence.len(), question.len());
    let hs = encode(p, "encoder", sentence, &vec![0; ts], e)?;
    let hs = stack(p, "sentence_modeling", c.n_sentence_modeling_layers, hs, e)?;
    let q_prefix = if c.share_base_encoder { "encoder" } else { "question_encoder" };
    let hq = encode(p, q_prefix, question, &vec![0; tq], e)?;
    let hq = stack(p, "question_modeling", c.n_question_modeling_layers, hq, e)?;
    let fused = if c.use_bidaf {
        let g = bidaf_attention(param(p, "bidaf/w")?, &hs, &Mask::all(&[1, ts]), &hq, &Mask::all(&[1, tq]))?;
        linear_named(p, "fusion", &g)?
    } else {
        hs.add(&hq.mean_pool_over_time(&Mask::all(&[1, tq]))?.reshape(&[1, 1, d])?)?
    };
    let top = match c.interaction_kind {
        InteractionKind::TwoLayerMlp => {
            let h = linear_named(p, "interaction/hidden", &fused)?.activate(e.activation);
            linear_named(p, "interaction/output", &h)?
        }
        InteractionKind::Transformer if c.interaction_includes_question => {
            let x = Arr::concat(&[&fused, &hq], 1)?;
            stack(p, "interaction", c.n_interaction_layers, x, e)?.slice(1, 0..ts)?
        }
        InteractionKind::Transformer => stack(p, "interaction", c.n_interaction_layers, fused, e)?,
    };
    let logits = linear_named(p, "span_head", &top)?;
    Ok((logits.slice(2, 0..1)?.reshape(&[1, ts])?, logits.slice(2, 1..2)?.reshape(&[1, ts])?))
}

/// p-QuASE start and end logits over the sentence range of one packed
/// pair, each `[1, T_s]`.
pub fn pquase_logits(p: &Params, c: &crate::pquase::PQuaseConfig, sentence: &[usize], question: &[usize]) -> Result<(Arr, Arr)> {
    let pack = crate::pquase::pack_pair(sentence, question, c.max_seq_len, c.question_first)?;
    let h = encode(p, "encoder", &pack.row.token_ids, &pack.row.segment_ids, &c.encoder)?;
    let ts = pack.sentence_range.len();
    let logits = linear_named(p, "span_head", &h.slice(1, pack.sentence_range)?)?;
    Ok((logits.slice(2, 0..1)?.reshape(&[1, ts])?, logits.slice(2, 1..2)?.reshape(&[1, ts])?))
}

/// Mean span loss of a batch, one example at a time.
pub fn batch_loss(
    logits: &dyn Fn(&[usize], &[usize]) -> Result<(Arr, Arr)>,
    batch: &[crate::span_qa::EncodedQA],
) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let (start, end) = logits(&ex.sentence, &ex.question)?;
        let golds: Vec<(usize, usize)> = ex.answers.iter().map(|a| (a.start, a.end)).collect();
        total += span_loss(&start, &end, &[ex.sentence.len()], &[golds]).data[0];
    }
    Ok(total / batch.len() as f64)
}
