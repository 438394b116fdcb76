//! Transformer building blocks with explicit additive masks.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;
use crate::params::{Init, Scope};

/// Added to attention scores of forbidden pairs. Large enough that the
/// softmax weight underflows to exactly zero in both f32 and f64.
pub const MASKED: f64 = -1e9;

pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &mut Scope, name: &str, input: usize, output: usize, std: f64) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            weight: s.create("weight", &[output, input], Init::Normal(std))?,
            bias: Some(s.create("bias", &[output], Init::Zeros)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // one 2-D product over all leading dimensions
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("at least one dimension");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let mut out_dims = dims.clone();
        *out_dims.last_mut().expect("at least one dimension") = self.weight.dim(0)?;
        let y = x
            .reshape((rows, input))?
            .matmul(&self.weight.t()?)?
            .reshape(out_dims)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Layer normalization over the last dimension, written with primitive
/// ops so that it is differentiable in every dtype.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, name: &str, d: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            gamma: s.create("gamma", &[d], Init::Ones)?,
            beta: s.create("beta", &[d], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(s: &mut Scope, name: &str, d: usize, hidden: usize, std: f64) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            up: Linear::new(&mut s, "up", d, hidden, std)?,
            down: Linear::new(&mut s, "down", hidden, d, std)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu_erf()?)
    }
}

/// Multi-head scaled dot-product attention.
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(s: &mut Scope, name: &str, d: usize, heads: usize, std: f64) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", d, d, std)?,
            k: Linear::new(&mut s, "k", d, d, std)?,
            v: Linear::new(&mut s, "v", d, d, std)?,
            o: Linear::new(&mut s, "o", d, d, std)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x
            .reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query`: (B, Tq, d); `memory`: (B, Tk, d); `mask`: additive,
    /// broadcastable to (B, heads, Tq, Tk).
    pub fn forward(&self, query: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(memory)?)?;
        let v = self.split(&self.v.forward(memory)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, d))?;
        self.o.forward(&out)
    }
}

/// Sinusoidal position encoding, shape (t, d).
pub fn position_encoding(t: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut pe = vec![0.0f64; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::from_vec(pe, (t, d), device)?.to_dtype(dtype)?)
}

/// Builds an additive (B, 1, Tq, Tk) mask from a predicate over
/// (batch, query, key).
pub fn additive_mask(
    b: usize,
    tq: usize,
    tk: usize,
    dtype: DType,
    device: &Device,
    allowed: impl Fn(usize, usize, usize) -> bool,
) -> Result<Tensor> {
    let mut m = vec![0.0f64; b * tq * tk];
    for bi in 0..b {
        for i in 0..tq {
            for j in 0..tk {
                if !allowed(bi, i, j) {
                    m[(bi * tq + i) * tk + j] = MASKED;
                }
            }
        }
    }
    Ok(Tensor::from_vec(m, (b, 1, tq, tk), device)?.to_dtype(dtype)?)
}

/// Masks for one padded batch of sequences.
pub struct Masks {
    /// Keys restricted to real steps.
    pub padding: Tensor,
    /// Padding plus keys restricted to the query's beat.
    pub beat: Tensor,
    /// Padding plus keys restricted to the past.
    pub causal: Tensor,
}

impl Masks {
    pub fn new(lengths: &[usize], t: usize, beat_ids: &[u32], dtype: DType, device: &Device) -> Result<Self> {
        let b = lengths.len();
        let real = |bi: usize, j: usize| j < lengths[bi];
        Ok(Self {
            padding: additive_mask(b, t, t, dtype, device, |bi, _, j| real(bi, j))?,
            beat: additive_mask(b, t, t, dtype, device, |bi, i, j| {
                real(bi, j) && beat_ids[bi * t + i] == beat_ids[bi * t + j]
            })?,
            causal: additive_mask(b, t, t, dtype, device, |bi, i, j| real(bi, j) && j <= i)?,
        })
    }
}

/// Float mask (B, T, 1) with ones on real steps.
pub fn step_mask(lengths: &[usize], t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0.0f64; lengths.len() * t];
    for (bi, &len) in lengths.iter().enumerate() {
        m[bi * t..bi * t + len.min(t)].fill(1.0);
    }
    Ok(Tensor::from_vec(m, (lengths.len(), t, 1), device)?.to_dtype(dtype)?)
}
