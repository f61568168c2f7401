//! Transformer building blocks written against candle primitives so that
//! every op has a backward pass in both f32 and f64.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Result;

const LN_EPS: f64 = 1e-5;

/// Creates named parameters in a fixed order from a seeded generator.
pub(crate) struct ParamBuilder<'a> {
    pub store: &'a mut BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    /// Half-width of the uniform init for embeddings and projections.
    pub init_scale: f64,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(
        store: &'a mut BTreeMap<String, Var>,
        seed: u64,
        dtype: DType,
        device: Device,
        init_scale: f64,
    ) -> Self {
        ParamBuilder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
            init_scale,
        }
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let previous = self.store.insert(name.to_string(), var);
        debug_assert!(previous.is_none(), "parameter {name} created twice");
        Ok(out)
    }

    /// Uniform in `[-scale, scale]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], scale: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-scale..=scale))
            .collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, len: usize, value: f64) -> Result<Tensor> {
        self.insert(name, vec![value; len], &[len])
    }
}

/// Softmax over the last axis with the max shift held constant.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

pub(crate) fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Tanh-approximated GELU composed from primitives. The fused op's backward uses
/// rounded constants, which shows up in finite-difference checks.
pub(crate) fn gelu(x: &Tensor) -> Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = (x + (x.sqr()? * x)?.affine(0.044715, 0.0)?)?.affine(c, 0.0)?;
    Ok((x * inner.tanh()?.affine(0.5, 0.5)?)?)
}

/// Inverted dropout with masks drawn from a seeded generator.
pub(crate) struct Dropout {
    rng: Option<ChaCha8Rng>,
    p: f64,
}

impl Dropout {
    pub fn new(p: f64, seed: Option<u64>) -> Self {
        Dropout {
            rng: seed.filter(|_| p > 0.0).map(ChaCha8Rng::seed_from_u64),
            p,
        }
    }

    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x.clone());
        };
        let scale = (1.0 / (1.0 - self.p)) as f32;
        let p = self.p;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

pub(crate) struct Linear {
    w: Tensor,
    b: Tensor,
    out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let scale = pb.init_scale;
        let w = pb.uniform(&format!("{name}.weight"), &[in_dim, out_dim], scale)?;
        let b = pb.constant(&format!("{name}.bias"), out_dim, 0.0)?;
        Ok(Linear { w, b, out_dim })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = dims[dims.len() - 1];
        let rows = x.elem_count() / in_dim;
        let y = x
            .reshape((rows, in_dim))?
            .matmul(&self.w)?
            .broadcast_add(&self.b)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank >= 1") = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

pub(crate) struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: pb.constant(&format!("{name}.gamma"), dim, 1.0)?,
            beta: pb.constant(&format!("{name}.beta"), dim, 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    n_heads: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, name: &str, hidden: usize, n_heads: usize) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(pb, &format!("{name}.q"), hidden, hidden)?,
            k: Linear::new(pb, &format!("{name}.k"), hidden, hidden)?,
            v: Linear::new(pb, &format!("{name}.v"), hidden, hidden)?,
            o: Linear::new(pb, &format!("{name}.o"), hidden, hidden)?,
            n_heads,
        })
    }

    /// `key_bias` has shape `(B, 1, 1, Lk)`: 0 for real keys, a large negative value for padding.
    /// No causal mask: every query sees every real key.
    pub fn forward(&self, queries: &Tensor, keys: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        let (b, lq, hidden) = queries.dims3()?;
        let lk = keys.dim(1)?;
        let hd = hidden / self.n_heads;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((b, len, self.n_heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(queries)?, lq)?;
        let k = split(self.k.forward(keys)?, lk)?;
        let v = split(self.v.forward(keys)?, lk)?;
        let scores = q
            .matmul(&k.t()?)?
            .affine(1.0 / (hd as f64).sqrt(), 0.0)?
            .broadcast_add(key_bias)?;
        let probs = softmax_last(&scores)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, lq, hidden))?;
        self.o.forward(&ctx)
    }
}

pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, hidden: usize, ffn: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(pb, &format!("{name}.up"), hidden, ffn)?,
            down: Linear::new(pb, &format!("{name}.down"), ffn, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&gelu(&self.up.forward(x)?)?)
    }
}

/// Pre-LN encoder block.
pub(crate) struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, hidden: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(EncoderLayer {
            ln_attn: LayerNorm::new(pb, &format!("{name}.ln_attn"), hidden)?,
            attn: Attention::new(pb, &format!("{name}.attn"), hidden, heads)?,
            ln_ffn: LayerNorm::new(pb, &format!("{name}.ln_ffn"), hidden)?,
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), hidden, ffn)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: &Tensor, drop: &mut Dropout) -> Result<Tensor> {
        let h = self.ln_attn.forward(x)?;
        let x = (x + drop.apply(&self.attn.forward(&h, &h, bias)?)?)?;
        let h = self.ln_ffn.forward(&x)?;
        Ok((&x + drop.apply(&self.ffn.forward(&h)?)?)?)
    }
}

/// Pre-LN decoder block: bidirectional self-attention, cross-attention, feed-forward.
pub(crate) struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, hidden: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(DecoderLayer {
            ln_self: LayerNorm::new(pb, &format!("{name}.ln_self"), hidden)?,
            self_attn: Attention::new(pb, &format!("{name}.self_attn"), hidden, heads)?,
            ln_cross: LayerNorm::new(pb, &format!("{name}.ln_cross"), hidden)?,
            cross_attn: Attention::new(pb, &format!("{name}.cross_attn"), hidden, heads)?,
            ln_ffn: LayerNorm::new(pb, &format!("{name}.ln_ffn"), hidden)?,
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), hidden, ffn)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        self_bias: &Tensor,
        memory: &Tensor,
        memory_bias: &Tensor,
        drop: &mut Dropout,
    ) -> Result<Tensor> {
        let h = self.ln_self.forward(x)?;
        let x = (x + drop.apply(&self.self_attn.forward(&h, &h, self_bias)?)?)?;
        let h = self.ln_cross.forward(&x)?;
        let x = (&x + drop.apply(&self.cross_attn.forward(&h, memory, memory_bias)?)?)?;
        let h = self.ln_ffn.forward(&x)?;
        Ok((&x + drop.apply(&self.ffn.forward(&h)?)?)?)
    }
}
