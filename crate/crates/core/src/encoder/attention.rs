use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, LayerNorm, Linear};
use crate::tensor::{Mask, Mode, ParamStore, Tensor};

/// Scaled dot-product attention over `n_heads` heads with separate
/// query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}/query"), d_model, d_model, rng)?,
            key: Linear::new(store, &format!("{name}/key"), d_model, d_model, rng)?,
            value: Linear::new(store, &format!("{name}/value"), d_model, d_model, rng)?,
            output: Linear::new(store, &format!("{name}/output"), d_model, d_model, rng)?,
            n_heads,
            d_model,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t) = (x.shape()[0], x.shape()[1]);
        let dh = self.d_model / self.n_heads;
        x.reshape(&[b, t, self.n_heads, dh])?.permute(&[0, 2, 1, 3])
    }

    /// Returns the attended output `[B, Tq, d]` and the attention weights
    /// `[B, heads, Tq, Tk]`. `key_mask` is `[B, Tk]`.
    pub fn forward_with_weights(
        &self,
        store: &ParamStore,
        queries: &Tensor,
        keys: &Tensor,
        values: &Tensor,
        key_mask: &Mask,
    ) -> Result<(Tensor, Tensor)> {
        if queries.rank() != 3 || queries.shape()[2] != self.d_model {
            return Err(Error::Dimension {
                op: "multi_head_attention",
                lhs: queries.shape().to_vec(),
                rhs: vec![self.d_model],
            });
        }
        let (b, tq) = (queries.shape()[0], queries.shape()[1]);
        let tk = keys.shape()[1];
        let dh = self.d_model / self.n_heads;
        let q = self.split_heads(&self.query.forward(store, queries)?)?;
        let k = self.split_heads(&self.key.forward(store, keys)?)?;
        let v = self.split_heads(&self.value.forward(store, values)?)?;
        let scores = q
            .matmul(&k.transpose_last()?)?
            .scale(1.0 / (dh as f32).sqrt());
        let mask = key_mask.reshape(&[b, 1, 1, tk])?;
        let weights = scores.masked_softmax(&mask, 3)?;
        let ctx = weights
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, tq, self.d_model])?;
        Ok((self.output.forward(store, &ctx)?, weights))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, key_mask: &Mask) -> Result<Tensor> {
        Ok(self.forward_with_weights(store, x, x, x, key_mask)?.0)
    }
}

/// Post-norm block: `LN(x + MHA(x))`, then `LN(h + FFN(h))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
    pub activation: Activation,
    pub dropout_p: f32,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        activation: Activation,
        dropout_p: f32,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            attention: MultiHeadAttention::new(store, &format!("{name}/attention"), d_model, n_heads, rng)?,
            attention_norm: LayerNorm::new(store, &format!("{name}/attention_norm"), d_model)?,
            ff_in: Linear::new(store, &format!("{name}/ff_in"), d_model, d_ff, rng)?,
            ff_out: Linear::new(store, &format!("{name}/ff_out"), d_ff, d_model, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}/ff_norm"), d_model)?,
            activation,
            dropout_p,
        })
    }

    pub fn param_count(d: usize, d_ff: usize) -> usize {
        4 * Linear::num_params(d, d) + Linear::num_params(d, d_ff) + Linear::num_params(d_ff, d) + 4 * d
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, mask: &Mask, mode: &mut Mode<'_>) -> Result<Tensor> {
        let attn = self.attention.forward(store, x, mask)?.dropout(self.dropout_p, mode)?;
        let h = self.attention_norm.forward(store, &x.add(&attn)?)?;
        let ff = self.activation.apply(&self.ff_in.forward(store, &h)?);
        let ff = self.ff_out.forward(store, &ff)?.dropout(self.dropout_p, mode)?;
        self.ff_norm.forward(store, &h.add(&ff)?)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        activation: Activation,
        dropout_p: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..n_layers)
            .map(|i| {
                TransformerBlock::new(store, &format!("{name}/{i}"), d_model, n_heads, d_ff, activation, dropout_p, rng)
            })
            .collect::<Result<_>>()?;
        Ok(TransformerStack { blocks })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, mask: &Mask, mode: &mut Mode<'_>) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(store, &h, mask, mode)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(store: &mut ParamStore, lin: &Linear, w: Vec<f32>, b: Vec<f32>) {
        let (i, o) = (lin.in_dim, lin.out_dim);
        let wn = store.name(lin.weight).to_string();
        let bn = store.name(lin.bias).to_string();
        store.set_values(&wn, &[i, o], w).unwrap();
        store.set_values(&bn, &[o], b).unwrap();
    }

    #[test]
    fn singleton_sequence_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 1, 4], 1.0, &mut rng);
        let (out, w) = mha
            .forward_with_weights(&store, &x, &x, &x, &Mask::all(&[1, 1]))
            .unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        let expect = mha
            .output
            .forward(&store, &mha.value.forward(&store, &x).unwrap())
            .unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_key_gets_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let mask = Mask::new(vec![true, true, false, true, false, true], &[2, 3]).unwrap();
        let (_, w) = mha.forward_with_weights(&store, &x, &x, &x, &mask).unwrap();
        // w: [2, 2, 3, 3]
        for b in 0..2 {
            for h in 0..2 {
                for q in 0..3 {
                    let row = &w.data()[((b * 2 + h) * 3 + q) * 3..][..3];
                    for k in 0..3 {
                        if !mask.data()[b * 3 + k] {
                            assert_eq!(row[k], 0.0);
                        }
                    }
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn single_head_weights_match_hand_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 2, 1, &mut rng).unwrap();
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let half = vec![0.5, 0.0, 0.0, 0.5];
        set(&mut store, &mha.query, eye.clone(), vec![0.0; 2]);
        set(&mut store, &mha.key, half, vec![0.0; 2]);
        set(&mut store, &mha.value, eye.clone(), vec![0.0; 2]);
        set(&mut store, &mha.output, eye, vec![0.0; 2]);
        let x = Tensor::new(vec![1.0, 0.0, 0.0, 2.0], &[1, 2, 2]).unwrap();
        let (out, w) = mha
            .forward_with_weights(&store, &x, &x, &x, &Mask::all(&[1, 2]))
            .unwrap();
        // q0=(1,0) k0=(.5,0) k1=(0,1): scores/√2 = (.5/√2, 0); q1=(0,2): (0, 2/√2)
        let s = 2f64.sqrt();
        let sm = |a: f64, b: f64| (a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp()));
        let (w00, w01) = sm(0.5 / s, 0.0);
        let (w10, w11) = sm(0.0, 2.0 / s);
        let want = [w00, w01, w10, w11];
        for (a, b) in w.data().iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        // output = weights · x (identity value/output projections)
        let o00 = w00 * 1.0;
        let o01 = w01 * 2.0;
        assert!((out.data()[0] as f64 - o00).abs() < 1e-6);
        assert!((out.data()[1] as f64 - o01).abs() < 1e-6);
    }

    #[test]
    fn zero_output_projections_reduce_block_to_double_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "blk", 8, 2, 16, Activation::Gelu, 0.0, &mut rng).unwrap();
        set(&mut store, &block.attention.output, vec![0.0; 64], vec![0.0; 8]);
        set(&mut store, &block.ff_out, vec![0.0; 128], vec![0.0; 8]);
        let x = Tensor::randn(&[2, 3, 8], 1.5, &mut rng);
        let y = block.forward(&store, &x, &Mask::all(&[2, 3]), &mut Mode::Infer).unwrap();
        let ln = |t: &Tensor| block.attention_norm.forward(&store, t).unwrap();
        let want = ln(&ln(&x));
        assert_eq!(y.shape(), x.shape());
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
