//! Orthogonal decoder: a causal temporal stack produces one state per step,
//! then a short causal stack over the sub-token axis emits the four
//! sub-token distributions of that step.

use candle_core::{DType, Device, Tensor};

use crate::embed::CompoundEmbedding;
use crate::error::Result;
use crate::nn::{additive_mask, position_encoding, Attention, FeedForward, LayerNorm, Linear};
use crate::params::{Init, Scope};

/// Pre-norm decoder layer: masked self-attention, cross-attention, FFN.
pub struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross: Attention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(s: &mut Scope, name: &str, d: usize, heads: usize, ffn: usize, std: f64) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            ln1: LayerNorm::new(&mut s, "ln1", d)?,
            self_attn: Attention::new(&mut s, "self", d, heads, std)?,
            ln2: LayerNorm::new(&mut s, "ln2", d)?,
            cross: Attention::new(&mut s, "cross", d, heads, std)?,
            ln3: LayerNorm::new(&mut s, "ln3", d)?,
            ffn: FeedForward::new(&mut s, "ffn", d, ffn, std)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        self_mask: &Tensor,
        memory_mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, Some(self_mask))?)?;
        let h = self.ln2.forward(&x)?;
        let x = (&x + self.cross.forward(&h, memory, memory_mask)?)?;
        let h = self.ln3.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

pub struct OrthogonalDecoder {
    temporal: Vec<DecoderLayer>,
    ln_temporal: LayerNorm,
    sub_start: Tensor,
    subtoken: Vec<DecoderLayer>,
    ln_subtoken: LayerNorm,
    heads: Vec<Linear>,
    d: usize,
}

pub struct DecoderShape {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub temporal_layers: usize,
    pub subtoken_layers: usize,
    pub vocab: [usize; 4],
    pub std: f64,
}

impl OrthogonalDecoder {
    pub fn new(s: &mut Scope, name: &str, shape: &DecoderShape) -> Result<Self> {
        let mut s = s.sub(name);
        let DecoderShape { d, heads, ffn, std, .. } = *shape;
        let temporal = (0..shape.temporal_layers)
            .map(|i| DecoderLayer::new(&mut s, &format!("temporal{i}"), d, heads, ffn, std))
            .collect::<Result<_>>()?;
        let ln_temporal = LayerNorm::new(&mut s, "ln_temporal", d)?;
        let sub_start = s.create("sub_start", &[d], Init::Normal(std))?;
        let subtoken = (0..shape.subtoken_layers)
            .map(|i| DecoderLayer::new(&mut s, &format!("subtoken{i}"), d, heads, ffn, std))
            .collect::<Result<_>>()?;
        let ln_subtoken = LayerNorm::new(&mut s, "ln_subtoken", d)?;
        let heads = shape
            .vocab
            .iter()
            .enumerate()
            .map(|(j, &v)| Linear::new(&mut s, &format!("head{j}"), d, v, std))
            .collect::<Result<_>>()?;
        Ok(Self {
            temporal,
            ln_temporal,
            sub_start,
            subtoken,
            ln_subtoken,
            heads,
            d,
        })
    }

    /// Temporal stack. `x`: (B, T, d) right-shifted inputs with position
    /// encoding; `memory`: (B, Tm, d). Returns one state per step.
    pub fn temporal(
        &self,
        x: &Tensor,
        memory: &Tensor,
        causal: &Tensor,
        memory_mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut x = x.clone();
        for layer in &self.temporal {
            x = layer.forward(&x, memory, causal, memory_mask)?;
        }
        self.ln_temporal.forward(&x)
    }

    /// Sub-token stack over N independent steps. `h`: (N, d) temporal
    /// states; `columns`: the step's sub-token ids, one (N,) u32 tensor per
    /// column. Only columns before the predicted one are read, so callers
    /// may pass placeholders for sub-tokens not yet decoded.
    pub fn subtokens(&self, h: &Tensor, columns: &[Tensor], embed: &CompoundEmbedding) -> Result<Vec<Tensor>> {
        let n = h.dim(0)?;
        let dtype = h.dtype();
        let device = h.device();
        let mut steps = vec![self.sub_start.reshape((1, 1, self.d))?.broadcast_as((n, 1, self.d))?];
        for (j, col) in columns.iter().take(3).enumerate() {
            steps.push(embed.lookup(j, col)?.unsqueeze(1)?);
        }
        let pe = position_encoding(4, self.d, dtype, device)?;
        let mut x = Tensor::cat(&steps, 1)?.broadcast_add(&pe)?;
        let memory = h.unsqueeze(1)?;
        let causal = subtoken_mask(dtype, device)?;
        for layer in &self.subtoken {
            x = layer.forward(&x, &memory, &causal, None)?;
        }
        let x = self.ln_subtoken.forward(&x)?;
        self.heads
            .iter()
            .enumerate()
            .map(|(j, head)| head.forward(&x.narrow(1, j, 1)?.squeeze(1)?))
            .collect()
    }

    /// Teacher-forced pass. `ids`: flat (B * T * 4) targets of this branch.
    /// Returns four (B, T, V_j) logit tensors.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        causal: &Tensor,
        memory_mask: Option<&Tensor>,
        ids: &[u32],
        embed: &CompoundEmbedding,
    ) -> Result<Vec<Tensor>> {
        let (b, t, _) = x.dims3()?;
        let h = self.temporal(x, memory, causal, memory_mask)?;
        let columns = id_columns(ids, b * t, x.device())?;
        let logits = self.subtokens(&h.reshape((b * t, self.d))?, &columns, embed)?;
        logits
            .into_iter()
            .map(|l| {
                let v = l.dim(1)?;
                Ok(l.reshape((b, t, v))?)
            })
            .collect()
    }
}

/// Splits a flat `(n * 4)` id buffer into four (n,) tensors.
pub fn id_columns(ids: &[u32], n: usize, device: &Device) -> Result<Vec<Tensor>> {
    (0..4)
        .map(|j| {
            let col: Vec<u32> = ids.iter().skip(j).step_by(4).copied().collect();
            Ok(Tensor::from_vec(col, n, device)?)
        })
        .collect()
}

fn subtoken_mask(dtype: DType, device: &Device) -> Result<Tensor> {
    additive_mask(1, 4, 4, dtype, device, |_, i, j| j <= i)
}

/// Prepends a learned start vector and drops the last step: (B, T, d).
pub fn shift_right(x: &Tensor, start: &Tensor) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    let first = start.reshape((1, 1, d))?.broadcast_as((b, 1, d))?;
    if t <= 1 {
        return Ok(first.contiguous()?);
    }
    Ok(Tensor::cat(&[&first, &x.narrow(1, 0, t - 1)?], 1)?)
}
