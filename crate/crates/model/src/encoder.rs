//! Multiscale encoder: global and beat-restricted self-attention side by
//! side in every layer.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Attention, FeedForward, LayerNorm, Masks};
use crate::params::Scope;

pub struct MultiscaleLayer {
    ln1: LayerNorm,
    global: Attention,
    beat: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl MultiscaleLayer {
    pub fn new(s: &mut Scope, name: &str, d: usize, heads: usize, ffn: usize, std: f64) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            ln1: LayerNorm::new(&mut s, "ln1", d)?,
            global: Attention::new(&mut s, "global", d, heads, std)?,
            beat: Attention::new(&mut s, "beat", d, heads, std)?,
            ln2: LayerNorm::new(&mut s, "ln2", d)?,
            ffn: FeedForward::new(&mut s, "ffn", d, ffn, std)?,
        })
    }

    /// Output of the beat-restricted sublayer alone.
    pub fn beat_sublayer(&self, x: &Tensor, masks: &Masks) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        self.beat.forward(&h, &h, Some(&masks.beat))
    }

    /// Output of the global sublayer alone.
    pub fn global_sublayer(&self, x: &Tensor, masks: &Masks) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        self.global.forward(&h, &h, Some(&masks.padding))
    }

    pub fn forward(&self, x: &Tensor, masks: &Masks) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let g = self.global.forward(&h, &h, Some(&masks.padding))?;
        let b = self.beat.forward(&h, &h, Some(&masks.beat))?;
        let x = (x + ((g + b)? * 0.5)?)?;
        let f = self.ffn.forward(&self.ln2.forward(&x)?)?;
        Ok((x + f)?)
    }
}

pub struct MultiscaleEncoder {
    pub layers: Vec<MultiscaleLayer>,
    ln: LayerNorm,
}

impl MultiscaleEncoder {
    pub fn new(
        s: &mut Scope,
        name: &str,
        layers: usize,
        d: usize,
        heads: usize,
        ffn: usize,
        std: f64,
    ) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            layers: (0..layers)
                .map(|i| MultiscaleLayer::new(&mut s, &format!("layer{i}"), d, heads, ffn, std))
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(&mut s, "ln", d)?,
        })
    }

    /// `x` already carries the position encoding.
    pub fn forward(&self, x: &Tensor, masks: &Masks) -> Result<Tensor> {
        let mut x = x.clone();
        for layer in &self.layers {
            x = layer.forward(&x, masks)?;
        }
        self.ln.forward(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn single_beat_masks_coincide() {
        let mut store = ParamStore::new(0, DType::F64, Device::Cpu);
        let layer = MultiscaleLayer::new(&mut store.scope("t"), "l", 16, 2, 32, 0.2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 6, 16), &Device::Cpu).unwrap();
        let masks = Masks::new(&[6], 6, &[1; 6], DType::F64, &Device::Cpu).unwrap();
        let h = layer.ln1.forward(&x).unwrap();
        // same attention weights under both masks give the same output
        let a = layer.beat.forward(&h, &h, Some(&masks.padding)).unwrap();
        let b = layer.beat.forward(&h, &h, Some(&masks.beat)).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn output_shape_follows_input() {
        let mut store = ParamStore::new(0, DType::F32, Device::Cpu);
        let enc = MultiscaleEncoder::new(&mut store.scope("t"), "e", 2, 16, 4, 32, 0.02).unwrap();
        for t in [1, 5, 9] {
            let x = Tensor::zeros((2, t, 16), DType::F32, &Device::Cpu).unwrap();
            let beats: Vec<u32> = (0..2 * t).map(|i| (i % t) as u32 / 2).collect();
            let masks = Masks::new(&[t, t], t, &beats, DType::F32, &Device::Cpu).unwrap();
            assert_eq!(enc.forward(&x, &masks).unwrap().dims(), &[2, t, 16]);
        }
    }
}
