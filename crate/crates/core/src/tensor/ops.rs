use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::mask::{broadcast_index, broadcast_shape};
use super::{numel_of, Mask, Mode, Tensor};

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_C: f32 = 0.044_715;

/// How an operand of a broadcast op maps output positions to its own.
#[derive(Clone)]
enum Bcast {
    Same,
    // src is a suffix of the output shape: index i % n
    Cycle(usize),
    // src is a prefix followed by size-1 axes: index i / r
    Repeat(usize),
    Map(Arc<Vec<usize>>),
}

impl Bcast {
    fn plan(src: &[usize], out: &[usize]) -> Option<Bcast> {
        if src == out {
            return Some(Bcast::Same);
        }
        let stripped: &[usize] = {
            let lead = src.iter().take_while(|&&d| d == 1).count();
            &src[lead..]
        };
        if stripped.len() <= out.len() && out.ends_with(stripped) {
            return Some(Bcast::Cycle(numel_of(stripped).max(1)));
        }
        if src.len() == out.len() {
            let tail_ones = src.iter().rev().take_while(|&&d| d == 1).count();
            let j = src.len() - tail_ones;
            if src[..j] == out[..j] {
                return Some(Bcast::Repeat(numel_of(&out[j..])));
            }
        }
        broadcast_index(src, out).map(|v| Bcast::Map(Arc::new(v)))
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Repeat(r) => i / r,
            Bcast::Map(v) => v[i],
        }
    }

    fn reduce(&self, g: &[f32], src_len: usize) -> Vec<f32> {
        if let Bcast::Same = self {
            return g.to_vec();
        }
        let mut out = vec![0.0; src_len];
        for (i, &gi) in g.iter().enumerate() {
            out[self.at(i)] += gi;
        }
        out
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

/// Splits `shape` around `axis` into (outer, size, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

impl Tensor {
    // ---------------------------------------------------------------
    // linear algebra
    // ---------------------------------------------------------------

    /// Matrix product. `[.., m, k] · [k, n]` flattens the leading axes of
    /// the left operand; `[b.., m, k] · [b.., k, n]` is a batched product.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), b.shape());
        let err = || Error::Dimension {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let k = sa[sa.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(err());
        }
        let n = sb[sb.len() - 1];
        if sb.len() == 2 {
            let m = self.numel() / k.max(1);
            let m = if k == 0 { numel_of(&sa[..sa.len() - 1]) } else { m };
            let mut out = vec![0.0; m * n];
            gemm_nn(self.data(), b.data(), &mut out, m, k, n);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            let (a_t, b_t) = (self.clone(), b.clone());
            return Ok(Tensor::from_op("matmul", shape, out, &[self, b], move |g, _| {
                let ga = a_t.requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, b_t.data(), &mut ga, m, n, k);
                    ga
                });
                let gb = b_t.requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(a_t.data(), g, &mut gb, m, k, n);
                    gb
                });
                vec![ga, gb]
            }));
        }
        if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let batch = numel_of(&sa[..sa.len() - 2]);
        let m = sa[sa.len() - 2];
        let mut out = vec![0.0; batch * m * n];
        for z in 0..batch {
            gemm_nn(
                &self.data()[z * m * k..(z + 1) * m * k],
                &b.data()[z * k * n..(z + 1) * k * n],
                &mut out[z * m * n..(z + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let (a_t, b_t) = (self.clone(), b.clone());
        Ok(Tensor::from_op("bmm", shape, out, &[self, b], move |g, _| {
            let ga = a_t.requires_grad().then(|| {
                let mut ga = vec![0.0; batch * m * k];
                for z in 0..batch {
                    gemm_nt(
                        &g[z * m * n..(z + 1) * m * n],
                        &b_t.data()[z * k * n..(z + 1) * k * n],
                        &mut ga[z * m * k..(z + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = b_t.requires_grad().then(|| {
                let mut gb = vec![0.0; batch * k * n];
                for z in 0..batch {
                    gemm_tn(
                        &a_t.data()[z * m * k..(z + 1) * m * k],
                        &g[z * m * n..(z + 1) * m * n],
                        &mut gb[z * k * n..(z + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!(
                "permute {perm:?} invalid for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![0usize; shape.len()];
        let mut s = 1;
        for i in (0..shape.len()).rev() {
            in_strides[i] = s;
            s *= shape[i];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = self.numel();
        let mut src = Vec::with_capacity(total);
        let mut counter = vec![0usize; out_shape.len()];
        let mut cur = 0usize;
        for _ in 0..total {
            src.push(cur);
            for ax in (0..out_shape.len()).rev() {
                counter[ax] += 1;
                cur += strides[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                cur -= strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        let x = self.data();
        let out: Vec<f32> = src.iter().map(|&i| x[i]).collect();
        Ok(Tensor::from_op("permute", out_shape, out, &[self], move |g, _| {
            let mut gx = vec![0.0; total];
            for (o, &i) in src.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Shape(format!(
                "transpose_last on shape {:?}",
                self.shape()
            )));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            &[self],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    // ---------------------------------------------------------------
    // elementwise
    // ---------------------------------------------------------------

    fn binary(&self, other: &Tensor, kind: BinKind, op: &'static str) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| {
            Error::Dimension {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            }
        })?;
        let err = || Error::Dimension {
            op,
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let pa = Bcast::plan(self.shape(), &out_shape).ok_or_else(err)?;
        let pb = Bcast::plan(other.shape(), &out_shape).ok_or_else(err)?;
        let (a, b) = (self.data(), other.data());
        let total = numel_of(&out_shape);
        let out: Vec<f32> = match (&pa, &pb, kind) {
            (Bcast::Same, Bcast::Same, BinKind::Add) => a.iter().zip(b).map(|(x, y)| x + y).collect(),
            (Bcast::Same, Bcast::Same, BinKind::Mul) => a.iter().zip(b).map(|(x, y)| x * y).collect(),
            _ => (0..total)
                .map(|i| {
                    let (x, y) = (a[pa.at(i)], b[pb.at(i)]);
                    match kind {
                        BinKind::Add => x + y,
                        BinKind::Sub => x - y,
                        BinKind::Mul => x * y,
                    }
                })
                .collect(),
        };
        let (a_t, b_t) = (self.clone(), other.clone());
        Ok(Tensor::from_op(op, out_shape, out, &[self, other], move |g, _| {
            let ga = a_t.requires_grad().then(|| match kind {
                BinKind::Add | BinKind::Sub => pa.reduce(g, a_t.numel()),
                BinKind::Mul => {
                    let bd = b_t.data();
                    let prod: Vec<f32> = g.iter().enumerate().map(|(i, gi)| gi * bd[pb.at(i)]).collect();
                    pa.reduce(&prod, a_t.numel())
                }
            });
            let gb = b_t.requires_grad().then(|| match kind {
                BinKind::Add => pb.reduce(g, b_t.numel()),
                BinKind::Sub => {
                    let neg: Vec<f32> = g.iter().map(|x| -x).collect();
                    pb.reduce(&neg, b_t.numel())
                }
                BinKind::Mul => {
                    let ad = a_t.data();
                    let prod: Vec<f32> = g.iter().enumerate().map(|(i, gi)| gi * ad[pa.at(i)]).collect();
                    pb.reduce(&prod, b_t.numel())
                }
            });
            vec![ga, gb]
        }))
    }

    /// Broadcasting addition.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Sub, "sub")
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let out = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op("scale", self.shape().to_vec(), out, &[self], move |g, _| {
            vec![Some(g.iter().map(|x| x * c).collect())]
        })
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f32) -> f32,
        df: fn(f32, f32) -> f32,
    ) -> Tensor {
        let out = self.data().iter().map(|&x| f(x)).collect();
        let x_t = self.clone();
        Tensor::from_op(name, self.shape().to_vec(), out, &[self], move |g, y| {
            let gx = g
                .iter()
                .zip(x_t.data())
                .zip(y)
                .map(|((gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Some(gx)]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        self.unary(
            "gelu",
            |x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh()),
            |x, _| {
                let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
            },
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary("tanh", f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` at training time,
    /// so inference is the identity (the very same tensor is returned).
    pub fn dropout(&self, p: f32, mode: &mut Mode<'_>) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout p must be in [0, 1), got {p}")));
        }
        let rng = match mode {
            Mode::Train(rng) if p > 0.0 => rng,
            _ => return Ok(self.clone()),
        };
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f32> = (0..self.numel())
            .map(|_| {
                let u = (rng.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32);
                if u >= p {
                    scale
                } else {
                    0.0
                }
            })
            .collect();
        let out = self.data().iter().zip(&keep).map(|(x, k)| x * k).collect();
        Ok(Tensor::from_op("dropout", self.shape().to_vec(), out, &[self], move |g, _| {
            vec![Some(g.iter().zip(&keep).map(|(gi, k)| gi * k).collect())]
        }))
    }

    // ---------------------------------------------------------------
    // structural
    // ---------------------------------------------------------------

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        check_axis(first.shape(), axis, "concat")?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total_w: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total_w);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let flags: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::from_op("concat", shape, out, parts, move |g, _| {
            let mut grads: Vec<Option<Vec<f32>>> = flags
                .iter()
                .zip(&widths)
                .map(|(&f, &w)| f.then(|| Vec::with_capacity(outer * w)))
                .collect();
            for o in 0..outer {
                let mut off = o * total_w;
                for (gp, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(v) = gp {
                        v.extend_from_slice(&g[off..off + w]);
                    }
                    off += w;
                }
            }
            grads
        }))
    }

    /// Sub-range `range` of `axis`.
    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Tensor> {
        check_axis(self.shape(), axis, "slice")?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        if range.start > range.end || range.end > n {
            return Err(Error::Index {
                what: "slice range end",
                index: range.end,
                bound: n,
            });
        }
        let w = (range.end - range.start) * inner;
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            let base = o * n * inner + range.start * inner;
            out.extend_from_slice(&self.data()[base..base + w]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = range.end - range.start;
        let total = self.numel();
        let start = range.start;
        Ok(Tensor::from_op("slice", shape, out, &[self], move |g, _| {
            let mut gx = vec![0.0; total];
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                gx[base..base + w].copy_from_slice(&g[o * w..(o + 1) * w]);
            }
            vec![Some(gx)]
        }))
    }

    /// Rows of the first axis selected by `ids` (embedding lookup).
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(Error::Shape("gather_rows on a scalar".into()));
        }
        let rows = self.shape()[0];
        let width = numel_of(&self.shape()[1..]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&self.data()[id * width..(id + 1) * width]);
        }
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(&self.shape()[1..]);
        let ids = ids.to_vec();
        let total = self.numel();
        Ok(Tensor::from_op("gather_rows", shape, out, &[self], move |g, _| {
            let mut gx = vec![0.0; total];
            for (r, &id) in ids.iter().enumerate() {
                super::add_into(&mut gx[id * width..(id + 1) * width], &g[r * width..(r + 1) * width]);
            }
            vec![Some(gx)]
        }))
    }

    /// Flat elements at `indices`, as a 1-D tensor.
    pub fn pick(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                what: "pick",
                index: bad,
                bound: n,
            });
        }
        let out = indices.iter().map(|&i| self.data()[i]).collect();
        let idx = indices.to_vec();
        Ok(Tensor::from_op("pick", vec![indices.len()], out, &[self], move |g, _| {
            let mut gx = vec![0.0; n];
            for (k, &i) in idx.iter().enumerate() {
                gx[i] += g[k];
            }
            vec![Some(gx)]
        }))
    }

    // ---------------------------------------------------------------
    // reductions
    // ---------------------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let s: f32 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![], vec![s], &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f32 = self.data().iter().sum::<f32>() / n as f32;
        Tensor::from_op("mean", vec![], vec![s], &[self], move |g, _| {
            vec![Some(vec![g[0] / n as f32; n])]
        })
    }

    /// Smallest element; the gradient flows to its first occurrence.
    pub fn min(&self) -> Result<Tensor> {
        let (arg, &v) = self
            .data()
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, &f32)>, (i, x)| match best {
                Some((_, b)) if *b <= *x => best,
                _ => Some((i, x)),
            })
            .ok_or(Error::DegenerateSlice { op: "min" })?;
        let n = self.numel();
        Ok(Tensor::from_op("min", vec![], vec![v], &[self], move |g, _| {
            let mut gx = vec![0.0; n];
            gx[arg] = g[0];
            vec![Some(gx)]
        }))
    }

    // ---------------------------------------------------------------
    // normalization
    // ---------------------------------------------------------------

    fn softmax_core(&self, mask: &Mask, axis: usize, log: bool) -> Result<Tensor> {
        let op = if log { "masked_log_softmax" } else { "masked_softmax" };
        check_axis(self.shape(), axis, op)?;
        let valid = mask.broadcast_to(self.shape())?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let fill = if log { f32::NEG_INFINITY } else { 0.0 };
        let mut out = vec![fill; x.len()];
        for o in 0..outer {
            for q in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + q;
                let mut mx = f32::NEG_INFINITY;
                let mut any = false;
                for k in 0..n {
                    if valid[at(k)] {
                        any = true;
                        mx = mx.max(x[at(k)]);
                    }
                }
                if !any {
                    return Err(Error::DegenerateSlice { op });
                }
                let mut z = 0.0f32;
                for k in 0..n {
                    if valid[at(k)] {
                        let e = (x[at(k)] - mx).exp();
                        out[at(k)] = e;
                        z += e;
                    }
                }
                let lz = z.ln();
                for k in 0..n {
                    if valid[at(k)] {
                        out[at(k)] = if log { x[at(k)] - mx - lz } else { out[at(k)] / z };
                    }
                }
            }
        }
        Ok(Tensor::from_op(op, self.shape().to_vec(), out, &[self], move |g, y| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for q in 0..inner {
                    let at = |k: usize| o * n * inner + k * inner + q;
                    if log {
                        let mut gs = 0.0f32;
                        for k in 0..n {
                            if valid[at(k)] {
                                gs += g[at(k)];
                            }
                        }
                        for k in 0..n {
                            if valid[at(k)] {
                                gx[at(k)] = g[at(k)] - y[at(k)].exp() * gs;
                            }
                        }
                    } else {
                        let mut dotp = 0.0f32;
                        for k in 0..n {
                            if valid[at(k)] {
                                dotp += g[at(k)] * y[at(k)];
                            }
                        }
                        for k in 0..n {
                            if valid[at(k)] {
                                gx[at(k)] = y[at(k)] * (g[at(k)] - dotp);
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Softmax along `axis` over entries where `mask` (broadcast to this
    /// shape) is true; masked entries come out exactly zero.
    pub fn masked_softmax(&self, mask: &Mask, axis: usize) -> Result<Tensor> {
        self.softmax_core(mask, axis, false)
    }

    /// Log-softmax counterpart; masked entries are `-inf`.
    pub fn masked_log_softmax(&self, mask: &Mask, axis: usize) -> Result<Tensor> {
        self.softmax_core(mask, axis, true)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.masked_softmax(&Mask::all(self.shape()), axis)
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = if d == 0 { 0 } else { self.numel() / d };
        let x = self.data();
        let (gv, bv) = (gain.data(), bias.data());
        let mut xhat = vec![0.0f32; x.len()];
        let mut inv_std = vec![0.0f32; rows];
        let mut out = vec![0.0f32; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let (x_t, g_t, b_t) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op("layer_norm", self.shape().to_vec(), out, &[self, gain, bias], move |g, _| {
            let gv = g_t.data();
            let gx = x_t.requires_grad().then(|| {
                let mut gx = vec![0.0f32; rows * d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0f32;
                    let mut m2 = 0.0f32;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 /= d as f32;
                    m2 /= d as f32;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        gx[r * d + j] = inv_std[r] * (dh - m1 - hr[j] * m2);
                    }
                }
                gx
            });
            let gg = g_t.requires_grad().then(|| {
                let mut gg = vec![0.0f32; d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                gg
            });
            let gb = b_t.requires_grad().then(|| {
                let mut gb = vec![0.0f32; d];
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
                gb
            });
            vec![gx, gg, gb]
        }))
    }

    // ---------------------------------------------------------------
    // pooling over the time axis: input [.., T, d], mask [.., T]
    // ---------------------------------------------------------------

    fn pool_dims(&self, mask: &Mask, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.rank() < 2 {
            return Err(Error::Shape(format!("{op} needs [.., T, d], got {:?}", self.shape())));
        }
        let r = self.rank();
        let (t, d) = (self.shape()[r - 2], self.shape()[r - 1]);
        let outer = numel_of(&self.shape()[..r - 2]);
        if mask.data().len() != outer * t {
            return Err(Error::Dimension {
                op,
                lhs: self.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        Ok((outer, t, d))
    }

    fn pooled_shape(&self) -> Vec<usize> {
        let r = self.rank();
        let mut s = self.shape()[..r - 2].to_vec();
        s.push(self.shape()[r - 1]);
        s
    }

    /// Average over unmasked time steps.
    pub fn mean_pool_over_time(&self, mask: &Mask) -> Result<Tensor> {
        let (outer, t, d) = self.pool_dims(mask, "mean_pool_over_time")?;
        let m = mask.data().to_vec();
        let x = self.data();
        let mut out = vec![0.0f32; outer * d];
        let mut counts = vec![0usize; outer];
        for o in 0..outer {
            let acc = &mut out[o * d..(o + 1) * d];
            for s in 0..t {
                if m[o * t + s] {
                    counts[o] += 1;
                    super::add_into(acc, &x[(o * t + s) * d..(o * t + s + 1) * d]);
                }
            }
            if counts[o] == 0 {
                return Err(Error::DegenerateSlice { op: "mean_pool_over_time" });
            }
            let c = counts[o] as f32;
            acc.iter_mut().for_each(|v| *v /= c);
        }
        let total = self.numel();
        Ok(Tensor::from_op("mean_pool_over_time", self.pooled_shape(), out, &[self], move |g, _| {
            let mut gx = vec![0.0f32; total];
            for o in 0..outer {
                let c = counts[o] as f32;
                for s in 0..t {
                    if m[o * t + s] {
                        for j in 0..d {
                            gx[(o * t + s) * d + j] = g[o * d + j] / c;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Elementwise maximum over unmasked time steps.
    pub fn max_pool_over_time(&self, mask: &Mask) -> Result<Tensor> {
        let (outer, t, d) = self.pool_dims(mask, "max_pool_over_time")?;
        let m = mask.data();
        let x = self.data();
        let mut out = vec![f32::NEG_INFINITY; outer * d];
        let mut arg = vec![usize::MAX; outer * d];
        for o in 0..outer {
            for s in 0..t {
                if !m[o * t + s] {
                    continue;
                }
                for j in 0..d {
                    let v = x[(o * t + s) * d + j];
                    if arg[o * d + j] == usize::MAX || v > out[o * d + j] {
                        out[o * d + j] = v;
                        arg[o * d + j] = (o * t + s) * d + j;
                    }
                }
            }
            if d > 0 && arg[o * d] == usize::MAX {
                return Err(Error::DegenerateSlice { op: "max_pool_over_time" });
            }
            if d == 0 && !(0..t).any(|s| m[o * t + s]) {
                return Err(Error::DegenerateSlice { op: "max_pool_over_time" });
            }
        }
        let total = self.numel();
        Ok(Tensor::from_op("max_pool_over_time", self.pooled_shape(), out, &[self], move |g, _| {
            let mut gx = vec![0.0f32; total];
            for (k, &a) in arg.iter().enumerate() {
                gx[a] += g[k];
            }
            vec![Some(gx)]
        }))
    }

    // ---------------------------------------------------------------
    // losses
    // ---------------------------------------------------------------

    /// `-log softmax(logits)[target]` for a 1-D logit vector.
    pub fn cross_entropy(&self, target: usize) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(Error::Shape(format!(
                "cross_entropy expects 1-D logits, got {:?}",
                self.shape()
            )));
        }
        let c = self.numel();
        self.reshape(&[1, c])?.cross_entropy_rows(&[Some(target)])
    }

    /// Mean cross-entropy over the rows of `[N, C]` logits whose target is
    /// `Some`; `None` rows (padding) are ignored.
    pub fn cross_entropy_rows(&self, targets: &[Option<usize>]) -> Result<Tensor> {
        if self.rank() != 2 || self.shape()[0] != targets.len() {
            return Err(Error::Dimension {
                op: "cross_entropy_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        for &t in targets.iter().flatten() {
            if t >= c {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: c,
                });
            }
        }
        let active = targets.iter().filter(|t| t.is_some()).count();
        if active == 0 {
            return Err(Error::DegenerateSlice { op: "cross_entropy_rows" });
        }
        let x = self.data();
        let mut probs = vec![0.0f32; n * c];
        let mut loss = 0.0f32;
        for r in 0..n {
            let Some(t) = targets[r] else { continue };
            let row = &x[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = row.iter().map(|v| (v - mx).exp()).sum();
            let lz = z.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - mx).exp() / z;
            }
            loss += -(row[t] - mx - lz);
        }
        loss /= active as f32;
        let targets = targets.to_vec();
        Ok(Tensor::from_op("cross_entropy", vec![], vec![loss], &[self], move |g, _| {
            let scale = g[0] / active as f32;
            let mut gx = vec![0.0f32; n * c];
            for r in 0..n {
                let Some(t) = targets[r] else { continue };
                for j in 0..c {
                    let onehot = if j == t { 1.0 } else { 0.0 };
                    gx[r * c + j] = scale * (probs[r * c + j] - onehot);
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f32], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let i3 = t(&[1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]);
        let b = t(&[0.3, -1.2, 2.5, 0.7, -0.1, 4.0], &[3, 2]);
        assert_eq!(i3.matmul(&b).unwrap().data(), b.data());
        let z = Tensor::zeros(&[3, 3]);
        assert!(z.matmul(&b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn masked_softmax_closed_form() {
        let x = t(&[5.0, 1.0, 9.0], &[3]);
        let m = Mask::new(vec![true, false, true], &[3]).unwrap();
        let y = x.masked_softmax(&m, 0).unwrap();
        let e = (-4.0f64).exp();
        let want = [e / (1.0 + e), 0.0, 1.0 / (1.0 + e)];
        for (a, b) in y.data().iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        assert_eq!(y.data()[1], 0.0);
        let u = t(&[0.0, 0.0, 0.0], &[3]).softmax(0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn fully_masked_slice_is_degenerate() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let m = Mask::new(vec![true, true, false, false], &[2, 2]).unwrap();
        assert!(matches!(
            x.masked_softmax(&m, 1),
            Err(Error::DegenerateSlice { .. })
        ));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let y = x.softmax(0).unwrap();
        let col0: f32 = [0, 2, 4].iter().map(|&i| y.data()[i]).sum();
        assert!((col0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_hand_values() {
        let g = t(&[1.0, 1.0], &[2]);
        let b = t(&[0.0, 0.0], &[2]);
        let y = t(&[1.0, 3.0], &[2]).layer_norm(&g, &b, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);
        let c = t(&[4.0, 4.0], &[2]).layer_norm(&g, &b, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn pooling_cases() {
        let x = t(&[1.0, 1.0, 3.0, 3.0], &[2, 2]);
        let all = Mask::all(&[2]);
        assert_eq!(x.mean_pool_over_time(&all).unwrap().data(), &[2.0, 2.0]);
        let one = Mask::new(vec![false, true], &[2]).unwrap();
        assert_eq!(x.max_pool_over_time(&one).unwrap().data(), &[3.0, 3.0]);
        let none = Mask::new(vec![false, false], &[2]).unwrap();
        assert!(matches!(
            x.max_pool_over_time(&none),
            Err(Error::DegenerateSlice { .. })
        ));
        assert!(matches!(
            x.mean_pool_over_time(&none),
            Err(Error::DegenerateSlice { .. })
        ));
    }

    #[test]
    fn cross_entropy_values() {
        let l = t(&[0.0, 0.0], &[2]).cross_entropy(0).unwrap();
        assert!((l.item().unwrap() - std::f32::consts::LN_2).abs() < 1e-7);
        let s = t(&[60.0, -60.0], &[2]).cross_entropy(0).unwrap();
        assert!(s.item().unwrap() < 1e-6);
        assert!(matches!(
            t(&[0.0, 0.0], &[2]).cross_entropy(2),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let l = Tensor::param(vec![0.5, -1.0, 2.0], &[3]).unwrap();
        l.cross_entropy(1).unwrap().backward().unwrap();
        let p = l.softmax(0).unwrap();
        let g = l.grad().unwrap();
        for j in 0..3 {
            let want = p.data()[j] - if j == 1 { 1.0 } else { 0.0 };
            assert!((g[j] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_inference_is_identity() {
        let x = t(&[1.0, 2.0, 3.0], &[3]);
        let y = x.dropout(0.5, &mut Mode::Infer).unwrap();
        assert!(y.same_storage(&x));
        assert!(x.dropout(1.0, &mut Mode::Infer).is_err());
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice(1, 2..3).unwrap().data(), b.data());
    }

    #[test]
    fn broadcast_add_bias_and_column() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let bias = t(&[10.0, 20.0, 30.0], &[3]);
        assert_eq!(x.add(&bias).unwrap().data(), &[11., 22., 33., 14., 25., 36.]);
        let col = t(&[100.0, 200.0], &[2, 1]);
        assert_eq!(x.add(&col).unwrap().data(), &[101., 102., 103., 204., 205., 206.]);
        let row = t(&[1.0, 2.0, 3.0], &[1, 3]);
        assert_eq!(col.add(&row).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn gather_rows_out_of_bounds() {
        let table = Tensor::zeros(&[3, 2]);
        assert!(matches!(table.gather_rows(&[3]), Err(Error::Index { .. })));
    }
}
