//! Central finite-difference checks of analytic gradients.
//!
//! Op checks evaluate the numeric side on a plain `f64` re-implementation
//! ([`reference`]) at the `f32` point where backprop ran, contracting the
//! output with a fixed random weight tensor. Full span models are checked
//! the same way against `f64` twins. The downstream heads are perturbed in
//! place in `f32` with a wider step.
//! The error of one coordinate is `|a − n| / max(|a|, |n|, floor)`.

pub mod reference;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::downstream::{BioTagger, EdgeProbe, FeatureMode, ProbeItem, TaggedSentence, TaggerConfig, TaggerInput};
use crate::encoder::{EncoderConfig, TransformerBlock};
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerNorm};
use crate::pquase::{PQuaseConfig, PQuaseModel};
use crate::span_qa::{batch_span_loss, EncodedQA, Span, SpanLogits, SpanModel};
use crate::squase::{bidaf_attention, SQuaseConfig, SQuaseModel, Variant};
use crate::tensor::{no_grad, Mask, Mode, ParamStore, Tensor};
use reference::{Arr, Params};

/// Step of the `f64` oracle.
pub const OP_H: f64 = 1e-3;
pub const OP_FLOOR: f64 = 1e-3;
/// Step of the `f64` model twins.
pub const MODEL_H: f64 = 1e-5;
pub const MODEL_FLOOR: f64 = 1e-3;
/// Coordinates sampled per parameter tensor in model and head checks.
pub const MODEL_COORDS: usize = 4;
/// `f32` in-place perturbation step for the downstream heads, which have no
/// `f64` twin.
pub const HEAD_H: f32 = 1e-2;
pub const HEAD_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Where the worst error occurred.
    pub worst_at: String,
    pub checked: usize,
    /// Largest `|f32 forward − f64 reference|`, scaled by `max(1, |ref|)`;
    /// zero for checks without a reference.
    pub forward_gap: f64,
}

impl GradReport {
    fn new(name: &str) -> Self {
        GradReport {
            name: name.to_string(),
            max_rel_error: 0.0,
            worst_at: String::new(),
            checked: 0,
            forward_gap: 0.0,
        }
    }

    fn record(&mut self, e: f64, at: impl FnOnce() -> String) {
        if e > self.max_rel_error || self.worst_at.is_empty() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst_at = at();
        }
        self.checked += 1;
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn forward_gap(f32_out: &[f32], reference: &[f64]) -> f64 {
    f32_out
        .iter()
        .zip(reference)
        .filter(|(a, b)| !(a.is_infinite() && **a as f64 == **b))
        .map(|(&a, &b)| (a as f64 - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares `analytic[i][j]` with the central difference of `reference`
/// in coordinate `j` of input `i`, every coordinate.
pub fn check_against_reference(
    name: &str,
    points: &[Arr],
    analytic: &[Vec<f32>],
    reference: &dyn Fn(&[Arr]) -> Result<f64>,
    h: f64,
    floor: f64,
) -> Result<GradReport> {
    let mut report = GradReport::new(name);
    let mut xs = points.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..points[i].data.len() {
            let x0 = points[i].data[j];
            xs[i].data[j] = x0 + h;
            let up = reference(&xs)?;
            xs[i].data[j] = x0 - h;
            let down = reference(&xs)?;
            xs[i].data[j] = x0;
            let numeric = (up - down) / (2.0 * h);
                        report.record(rel_error(grad[j] as f64, numeric, floor), || format!("input{i}#{j}"));
        }
    }
    Ok(report)
}

type OpFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;
type RefFn = Box<dyn Fn(&[Arr]) -> Result<Arr>>;

/// Backprop through `op` on the projection `Σ w∘op(x)` against the `f64`
/// reference of the same projection.
pub fn check_op(name: &str, op: &dyn Fn(&[Tensor]) -> Result<Tensor>, reference: &dyn Fn(&[Arr]) -> Result<Arr>, inputs: &[Tensor], seed: u64) -> Result<GradReport> {
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().into_leaf(true)).collect();
    let out = op(&leaves)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = Tensor::randn(out.shape(), 1.0, &mut rng);
    out.mul(&w)?.sum().backward()?;
    let analytic: Vec<Vec<f32>> = leaves.iter().map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()])).collect();
    let points: Vec<Arr> = inputs.iter().map(Arr::from_tensor).collect();
    let ref_out = reference(&points)?;
    if ref_out.shape != out.shape() {
        return Err(Error::Dimension {
            op: "gradcheck reference",
            lhs: out.shape().to_vec(),
            rhs: ref_out.shape,
        });
    }
    let wv = w.to_vec();
    let project = |xs: &[Arr]| -> Result<f64> { Ok(reference(xs)?.dot(&wv)) };
    let mut report = check_against_reference(name, &points, &analytic, &project, OP_H, OP_FLOOR)?;
    report.forward_gap = forward_gap(out.data(), &ref_out.data);
    Ok(report)
}

/// Checks `coords` random coordinates of every trainable parameter in the
/// store reached through `store` against the scalar `loss`, perturbing the
/// `f32` values in place.
#[allow(clippy::too_many_arguments)]
pub fn check_params<P>(
    name: &str,
    target: &mut P,
    store: fn(&mut P) -> &mut ParamStore,
    loss: &dyn Fn(&P) -> Result<Tensor>,
    coords: usize,
    h: f32,
    floor: f64,
    seed: u64,
) -> Result<GradReport> {
    store(target).zero_grad();
    let l = loss(target)?;
    if l.numel() != 1 {
        return Err(Error::Shape(format!("loss must be a scalar, got {:?}", l.shape())));
    }
    l.backward()?;
    drop(l);
    let params: Vec<(String, Vec<usize>, Vec<f32>, Vec<f32>)> = {
        let s = store(target);
        let trainable: Vec<bool> = s.iter().map(|(n, _)| s.find(n).is_some_and(|id| s.is_trainable(id))).collect();
        s.iter()
            .zip(trainable)
            .filter(|(_, keep)| *keep)
            .map(|((n, t), _)| {
                let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
                (n.to_string(), t.shape().to_vec(), t.to_vec(), g)
            })
            .collect()
    };
    store(target).zero_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::new(name);
    for (pname, shape, values, grad) in &params {
        let n = values.len();
        for j in sample(&mut rng, n, coords.min(n)).into_iter() {
            let mut eval = |delta: f32| -> Result<f64> {
                let mut v = values.clone();
                v[j] += delta;
                store(target).set_values(pname, shape, v)?;
                Ok(no_grad(|| loss(target))?.item()? as f64)
            };
            let numeric = eval(h).and_then(|up| Ok((up - eval(-h)?) / (2.0 * h as f64)));
            store(target).set_values(pname, shape, values.clone())?;
            report.record(rel_error(grad[j] as f64, numeric?, floor), || format!("{pname}#{j}"));
        }
    }
    Ok(report)
}

/// Checks `coords` random coordinates of every trainable parameter of a
/// span model: backprop through the `f32` model against central differences
/// of the `f64` twin `reference`, evaluated one unpadded example at a time.
pub fn check_model<M: SpanModel>(
    name: &str,
    model: &M,
    batch: &[EncodedQA],
    reference: &dyn Fn(&Params, &[usize], &[usize]) -> Result<(Arr, Arr)>,
    seed: u64,
) -> Result<GradReport> {
    let store = model.store();
    store.zero_grad();
    let loss = qa_loss::<M>(batch)(model)?;
    loss.backward()?;
    let mut params = reference::params_of(store);
    let ref_loss = |p: &Params| reference::batch_loss(&|s, q| reference(p, s, q), batch);
    let at_point = ref_loss(&params)?;
    let mut report = GradReport::new(name);
    report.forward_gap = (loss.item()? as f64 - at_point).abs() / at_point.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trainable: Vec<(String, Vec<f32>)> = store
        .iter()
        .filter(|(n, _)| store.find(n).is_some_and(|id| store.is_trainable(id)))
        .map(|(n, t)| (n.to_string(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
        .collect();
    store.zero_grad();
    for (pname, grad) in &trainable {
        for j in sample(&mut rng, grad.len(), MODEL_COORDS.min(grad.len())).into_iter() {
            let x0 = params[pname].data[j];
            params.get_mut(pname).expect("parameter").data[j] = x0 + MODEL_H;
            let up = ref_loss(&params)?;
            params.get_mut(pname).expect("parameter").data[j] = x0 - MODEL_H;
            let down = ref_loss(&params)?;
            params.get_mut(pname).expect("parameter").data[j] = x0;
            let numeric = (up - down) / (2.0 * MODEL_H);
            report.record(rel_error(grad[j] as f64, numeric, MODEL_FLOOR), || format!("{pname}#{j}"));
        }
    }
    Ok(report)
}

/// Values in `[-2, 2]`-ish kept at least `gap` apart and away from zero, so
/// kinked ops stay on one side under perturbation.
fn separated<R: Rng>(n: usize, gap: f32, rng: &mut R) -> Vec<f32> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f32> = (0..n)
        .map(|i| ((i / 2) as f32 + 1.0) * gap * if i % 2 == 0 { 1.0 } else { -1.0 })
        .map(|x| x + rng.gen_range(-0.2..0.2) * gap)
        .collect();
    v.shuffle(rng);
    v
}

fn t(data: Vec<f32>, shape: &[usize]) -> Tensor {
    Tensor::new(data, shape).expect("shape matches data")
}

fn ragged_mask(b: usize, t: usize, rng: &mut ChaCha8Rng) -> Mask {
    let lengths: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=t)).collect();
    Mask::from_lengths(&lengths, t)
}

/// One check per differentiable tensor op on fresh random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, rng);
    let mut cases: Vec<(&str, OpFn, RefFn, Vec<Tensor>)> = Vec::new();
    macro_rules! case {
        ($name:expr, $op:expr, $rf:expr, $inputs:expr) => {
            cases.push(($name, Box::new($op), Box::new($rf), $inputs))
        };
    }

    case!("matmul", |x| x[0].matmul(&x[1]), |x| x[0].matmul(&x[1]), vec![r(&[4, 5], &mut rng), r(&[5, 3], &mut rng)]);
    case!(
        "matmul_batched",
        |x| x[0].matmul(&x[1]),
        |x| x[0].matmul(&x[1]),
        vec![r(&[2, 3, 4], &mut rng), r(&[2, 4, 3], &mut rng)]
    );
    case!(
        "matmul_batched_4d",
        |x| x[0].matmul(&x[1]),
        |x| x[0].matmul(&x[1]),
        vec![r(&[2, 2, 3, 2], &mut rng), r(&[2, 2, 2, 3], &mut rng)]
    );
    case!(
        "matmul_shared_rhs",
        |x| x[0].matmul(&x[1]),
        |x| x[0].matmul(&x[1]),
        vec![r(&[2, 2, 3], &mut rng), r(&[3, 2], &mut rng)]
    );
    case!("permute", |x| x[0].permute(&[2, 0, 1]), |x| x[0].permute(&[2, 0, 1]), vec![r(&[2, 3, 4], &mut rng)]);
    case!("transpose_last", |x| x[0].transpose_last(), |x| x[0].transpose_last(), vec![r(&[2, 3, 4], &mut rng)]);
    case!("reshape", |x| x[0].reshape(&[4, 3]), |x| x[0].reshape(&[4, 3]), vec![r(&[2, 6], &mut rng)]);
    case!(
        "add_broadcast",
        |x| x[0].add(&x[1]),
        |x| x[0].add(&x[1]),
        vec![r(&[2, 3, 4], &mut rng), r(&[4], &mut rng)]
    );
    case!(
        "sub_broadcast",
        |x| x[0].sub(&x[1]),
        |x| x[0].sub(&x[1]),
        vec![r(&[2, 3], &mut rng), r(&[2, 1], &mut rng)]
    );
    case!(
        "mul_broadcast",
        |x| x[0].mul(&x[1]),
        |x| x[0].mul(&x[1]),
        vec![r(&[2, 3, 2], &mut rng), r(&[1, 3, 1], &mut rng)]
    );
    case!("scale", |x| Ok(x[0].scale(-1.7)), |x| Ok(x[0].scale(-1.7f32 as f64)), vec![r(&[5], &mut rng)]);
    case!("gelu", |x| Ok(x[0].gelu()), |x| Ok(x[0].gelu()), vec![r(&[8], &mut rng)]);
    case!("relu", |x| Ok(x[0].relu()), |x| Ok(x[0].relu()), vec![t(separated(8, 0.1, &mut rng), &[8])]);
    case!("tanh", |x| Ok(x[0].tanh()), |x| Ok(x[0].tanh()), vec![r(&[8], &mut rng)]);
    case!("sigmoid", |x| Ok(x[0].sigmoid()), |x| Ok(x[0].sigmoid()), vec![r(&[8], &mut rng)]);
    // the reference reuses the op's own keep/scale pattern, read off a ones input
    let drop_seed = rng.gen::<u64>();
    let dropout = move |x: &Tensor| {
        let mut d = ChaCha8Rng::seed_from_u64(drop_seed);
        x.dropout(0.3, &mut Mode::Train(&mut d))
    };
    let keep = Arr::from_tensor(&dropout(&Tensor::full(&[10], 1.0))?);
    case!("dropout", move |x| dropout(&x[0]), move |x| x[0].mul(&keep), vec![r(&[10], &mut rng)]);
    case!(
        "concat",
        |x| Tensor::concat(&[&x[0], &x[1]], 1),
        |x| Arr::concat(&[&x[0], &x[1]], 1),
        vec![r(&[2, 2, 3], &mut rng), r(&[2, 1, 3], &mut rng)]
    );
    case!("slice", |x| x[0].slice(1, 1..3), |x| x[0].slice(1, 1..3), vec![r(&[2, 4, 2], &mut rng)]);
    case!(
        "gather_rows",
        |x| x[0].gather_rows(&[2, 0, 2, 1]),
        |x| x[0].gather_rows(&[2, 0, 2, 1]),
        vec![r(&[3, 4], &mut rng)]
    );
    case!("pick", |x| x[0].pick(&[5, 0, 5, 3]), |x| Ok(x[0].pick(&[5, 0, 5, 3])), vec![r(&[2, 3], &mut rng)]);
    case!("sum", |x| Ok(x[0].sum()), |x| Ok(x[0].sum()), vec![r(&[2, 3], &mut rng)]);
    case!("mean", |x| Ok(x[0].mean()), |x| Ok(x[0].mean()), vec![r(&[2, 3], &mut rng)]);
    case!("min", |x| x[0].min(), |x| Ok(x[0].min()), vec![t(separated(6, 0.1, &mut rng), &[6])]);
    case!("softmax", |x| x[0].softmax(1), |x| x[0].softmax(1), vec![r(&[2, 5], &mut rng)]);
    let m = ragged_mask(3, 5, &mut rng);
    let m2 = m.clone();
    case!(
        "masked_softmax",
        move |x| x[0].masked_softmax(&m, 1),
        move |x| x[0].masked_softmax(&m2, 1, false),
        vec![r(&[3, 5], &mut rng)]
    );
    let m = Mask::new(vec![true, false, true, true], &[1, 4, 1])?;
    let m2 = m.clone();
    case!(
        "masked_softmax_inner_axis",
        move |x| x[0].masked_softmax(&m, 1),
        move |x| x[0].masked_softmax(&m2, 1, false),
        vec![r(&[2, 4, 3], &mut rng)]
    );
    // masked entries are -inf; only the live ones enter the projection
    let m = ragged_mask(3, 5, &mut rng);
    let live: Vec<usize> = (0..15).filter(|&i| m.data()[i]).collect();
    let (m2, live2) = (m.clone(), live.clone());
    case!(
        "masked_log_softmax",
        move |x| x[0].masked_log_softmax(&m, 1)?.pick(&live),
        move |x| Ok(x[0].masked_softmax(&m2, 1, true)?.pick(&live2)),
        vec![r(&[3, 5], &mut rng)]
    );
    case!(
        "layer_norm",
        |x| x[0].layer_norm(&x[1], &x[2], LayerNorm::EPS),
        |x| x[0].layer_norm(&x[1], &x[2], LayerNorm::EPS as f64),
        vec![r(&[3, 6], &mut rng), r(&[6], &mut rng), r(&[6], &mut rng)]
    );
    let m = ragged_mask(2, 4, &mut rng);
    let m2 = m.clone();
    case!(
        "mean_pool_over_time",
        move |x| x[0].mean_pool_over_time(&m),
        move |x| x[0].mean_pool_over_time(&m2),
        vec![r(&[2, 4, 3], &mut rng)]
    );
    let m = ragged_mask(2, 4, &mut rng);
    let m2 = m.clone();
    case!(
        "max_pool_over_time",
        move |x| x[0].max_pool_over_time(&m),
        move |x| x[0].max_pool_over_time(&m2),
        vec![t(separated(24, 0.1, &mut rng), &[2, 4, 3])]
    );
    let target = rng.gen_range(0..5);
    case!(
        "cross_entropy",
        move |x| x[0].cross_entropy(target),
        move |x| Ok(x[0].reshape(&[1, 5])?.cross_entropy_rows(&[Some(target)])),
        vec![r(&[5], &mut rng)]
    );
    let targets = vec![Some(1), None, Some(3)];
    let targets2 = targets.clone();
    case!(
        "cross_entropy_rows",
        move |x| x[0].cross_entropy_rows(&targets),
        move |x| Ok(x[0].cross_entropy_rows(&targets2)),
        vec![r(&[3, 4], &mut rng)]
    );
    // two paths through one leaf must accumulate
    case!(
        "shared_subexpression",
        |x| x[0].mul(&x[0])?.add(&x[0].tanh()),
        |x| x[0].mul(&x[0])?.add(&x[0].tanh()),
        vec![r(&[6], &mut rng)]
    );

    cases
        .iter()
        .enumerate()
        .map(|(i, (name, op, rf, inputs))| check_op(name, op.as_ref(), rf.as_ref(), inputs, seed.wrapping_add(i as u64)))
        .collect()
}

fn block_check(seed: u64, rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (b, tt, d, heads, d_ff) = (2, 3, 8, 2, 8);
    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, "block", d, heads, d_ff, Activation::Gelu, 0.0, rng)?;
    // move gains and biases off their special initial values
    let names: Vec<String> = reference::BLOCK_PARAMS.iter().map(|n| format!("block/{n}")).collect();
    for n in &names {
        let shape = store.get(store.find(n).expect("block parameter")).shape().to_vec();
        let v = Tensor::randn(&shape, 0.5, rng).to_vec();
        let v = if n.ends_with("gain") { v.iter().map(|x| 1.0 + x).collect() } else { v };
        store.set_values(n, &shape, v)?;
    }
    let mask = ragged_mask(b, tt, rng);
    let x = Tensor::randn(&[b, tt, d], 1.0, rng).into_leaf(true);
    let out = block.forward(&store, &x, &mask, &mut Mode::Infer)?;
    let w = Tensor::randn(out.shape(), 1.0, rng);
    out.mul(&w)?.sum().backward()?;
    let mut points = vec![Arr::from_tensor(&x)];
    let mut analytic = vec![x.grad().unwrap_or_else(|| vec![0.0; x.numel()])];
    for n in &names {
        let p = store.get(store.find(n).expect("block parameter"));
        points.push(Arr::from_tensor(p));
        analytic.push(p.grad().unwrap_or_else(|| vec![0.0; p.numel()]));
    }
    let wv = w.to_vec();
    let reference = |xs: &[Arr]| -> Result<Arr> {
        reference::transformer_block(&xs[0], &mask, &xs[1..], heads, Activation::Gelu, LayerNorm::EPS as f64)
    };
    let gap = forward_gap(out.data(), &reference(&points)?.data);
    let project = |xs: &[Arr]| -> Result<f64> { Ok(reference(xs)?.dot(&wv)) };
    let mut report = check_against_reference("transformer_block", &points, &analytic, &project, OP_H, OP_FLOOR)?;
    report.forward_gap = gap;
    let _ = seed;
    Ok(report)
}

/// Layers built from several ops: the transformer block, the bidirectional
/// attention block and the span loss against `f64` references; the BiLSTM
/// tagger and the edge probe by in-place perturbation.
pub fn composite_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, rng);
    let mut reports = vec![block_check(seed, &mut rng)?];

    let (b, ts, tq, d) = (2, 5, 3, 4);
    let s_mask = ragged_mask(b, ts, &mut rng);
    let q_mask = ragged_mask(b, tq, &mut rng);
    let (s2, q2) = (s_mask.clone(), q_mask.clone());
    let op = move |x: &[Tensor]| bidaf_attention(&x[0], &x[1], &s_mask, &x[2], &q_mask);
    let rf = move |x: &[Arr]| reference::bidaf_attention(&x[0], &x[1], &s2, &x[2], &q2);
    // similarity rows must not tie under the max; well-separated random
    // inputs make that overwhelmingly likely, and the reference check would
    // show it
    let inputs = vec![r(&[3 * d], &mut rng), r(&[b, ts, d], &mut rng), r(&[b, tq, d], &mut rng)];
    reports.push(check_op("bidaf_attention", &op, &rf, &inputs, seed)?);

    let lengths = vec![5, 3];
    let golds = vec![vec![(1, 3)], vec![(0, 1), (2, 3)]];
    let (l2, g2) = (lengths.clone(), golds.clone());
    let op = move |x: &[Tensor]| {
        let logits = SpanLogits {
            start: x[0].clone(),
            end: x[1].clone(),
            mask: Mask::from_lengths(&lengths, 5),
            lengths: lengths.clone(),
        };
        let spans: Vec<Vec<Span>> = golds.iter().map(|g| g.iter().map(|&(s, e)| Span::new(s, e)).collect()).collect();
        let refs: Vec<&[Span]> = spans.iter().map(Vec::as_slice).collect();
        batch_span_loss(&logits, &refs)
    };
    let rf = move |x: &[Arr]| Ok(reference::span_loss(&x[0], &x[1], &l2, &g2));
    let inputs = vec![r(&[2, 5], &mut rng), r(&[2, 5], &mut rng)];
    reports.push(check_op("batch_span_loss", &op, &rf, &inputs, seed)?);

    for mode in [FeatureMode::Concatenate, FeatureMode::Replace] {
        let cfg = TaggerConfig {
            vocab_size: 10,
            word_dim: 3,
            feature_dim: 4,
            mode,
            hidden: 3,
            n_tags: 3,
        };
        let mut tagger = BioTagger::new(cfg, seed)?;
        let data: Vec<TaggedSentence> = [4usize, 2]
            .iter()
            .map(|&n| TaggedSentence {
                input: TaggerInput {
                    token_ids: (0..n).map(|_| rng.gen_range(0..10)).collect(),
                    features: Some(r(&[n, 4], &mut rng)),
                },
                tags: (0..n).map(|_| rng.gen_range(0..3)).collect(),
            })
            .collect();
        let loss = move |m: &BioTagger| m.loss(&data.iter().collect::<Vec<_>>());
        let name = match mode {
            FeatureMode::Concatenate => "bilstm_tagger_concat",
            FeatureMode::Replace => "bilstm_tagger_replace",
        };
        reports.push(check_params(name, &mut tagger, |m| &mut m.store, &loss, MODEL_COORDS, HEAD_H, HEAD_FLOOR, seed)?);
    }

    let mut probe = EdgeProbe::new(4, 5, 3, seed)?;
    let items: Vec<ProbeItem> = (0..3)
        .map(|i| ProbeItem {
            encoding: r(&[5, 4], &mut rng),
            span1: 0..2,
            span2: 3..5,
            label: i,
        })
        .collect();
    let loss = move |p: &EdgeProbe| p.loss(&items.iter().collect::<Vec<_>>());
    reports.push(check_params("edge_probe", &mut probe, |p| &mut p.store, &loss, MODEL_COORDS, HEAD_H, HEAD_FLOOR, seed)?);
    Ok(reports)
}

/// Encoder at `d_model = 8` with one layer and no dropout.
pub fn tiny_encoder(vocab_size: usize) -> EncoderConfig {
    let mut c = EncoderConfig::desk(vocab_size);
    c.d_model = 8;
    c.n_heads = 2;
    c.n_layers = 1;
    c.d_ff = 16;
    c.max_positions = 32;
    c.dropout_p = 0.0;
    c
}

/// Two QA examples with sentences of 3 to 6 tokens. Tokens within a
/// question are distinct so no two question positions tie under the
/// max-over-question in the attention block.
pub fn tiny_batch(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<EncodedQA> {
    (0..2)
        .map(|_| {
            let n = rng.gen_range(3..=6);
            let start = rng.gen_range(0..n);
            let end = rng.gen_range(start + 1..=n);
            let q = rng.gen_range(2..=4).min(vocab - 4);
            EncodedQA {
                sentence: (0..n).map(|_| rng.gen_range(4..vocab)).collect(),
                question: sample(rng, vocab - 4, q).into_iter().map(|i| i + 4).collect(),
                answers: vec![Span::new(start, end)],
            }
        })
        .collect()
}

pub fn qa_loss<M: SpanModel>(batch: &[EncodedQA]) -> impl Fn(&M) -> Result<Tensor> + '_ {
    move |m: &M| {
        let refs: Vec<&EncodedQA> = batch.iter().collect();
        let logits = m.span_logits(&refs, &mut Mode::Infer)?;
        let golds: Vec<&[Span]> = batch.iter().map(|e| e.answers.as_slice()).collect();
        batch_span_loss(&logits, &golds)
    }
}

/// Every s-QuASE variant and p-QuASE at `d_model = 8`, sentences of at most
/// six tokens, span loss on a batch of two.
pub fn model_suite(seed: u64) -> Result<Vec<GradReport>> {
    const VOCAB: usize = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for v in [Variant::I, Variant::II, Variant::III, Variant::IV, Variant::V] {
        let batch = tiny_batch(&mut rng, VOCAB);
        let config = SQuaseConfig::variant(v, tiny_encoder(VOCAB));
        let model = SQuaseModel::new(&config, seed)?;
        let twin = |p: &Params, s: &[usize], q: &[usize]| reference::squase_logits(p, &config, s, q);
        reports.push(check_model(&format!("squase_{v:?}"), &model, &batch, &twin, seed)?);
    }
    let batch = tiny_batch(&mut rng, VOCAB);
    let config = PQuaseConfig::new(tiny_encoder(VOCAB));
    let model = PQuaseModel::new(&config, seed)?;
    let twin = |p: &Params, s: &[usize], q: &[usize]| reference::pquase_logits(p, &config, s, q);
    reports.push(check_model("pquase", &model, &batch, &twin, seed)?);
    Ok(reports)
}
