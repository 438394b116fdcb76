//! The two-branch model. The Composer encodes score tokens into a
//! quantized latent sequence and decodes them back; the Pianist encodes
//! performance tokens into one Gaussian latent per sequence and decodes
//! performance tokens conditioned on both latents.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use xmvae_core::dataset::Batch;

use crate::config::ModelConfig;
use crate::decoder::{shift_right, DecoderShape, OrthogonalDecoder};
use crate::embed::{CompoundEmbedding, PvEmbedding};
use crate::encoder::MultiscaleEncoder;
use crate::error::{Error, Result};
use crate::nn::{position_encoding, step_mask, Linear, Masks};
use crate::params::{Init, ParamStore, Scope};
use crate::vq::Codebook;

/// Host-side batch plus the masks every branch needs.
pub struct Inputs {
    pub b: usize,
    pub t: usize,
    pub score_ids: Vec<u32>,
    pub perf_ids: Vec<u32>,
    pub pv: Vec<f32>,
    pub beat_ids: Vec<u32>,
    pub lengths: Vec<usize>,
    pub masks: Masks,
    /// (B, T, 1), ones on real steps.
    pub steps: Tensor,
}

impl Inputs {
    /// Builds inputs from a padded batch, cutting rows to `max_len` steps.
    pub fn from_batch(batch: &Batch, max_len: usize, dtype: DType, device: &Device) -> Result<Self> {
        if batch.size == 0 || batch.t_max == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let t = batch.t_max.min(max_len);
        let b = batch.size;
        let mut score_ids = Vec::with_capacity(b * t * 4);
        let mut perf_ids = Vec::with_capacity(b * t * 4);
        let mut pv = Vec::with_capacity(b * t * 4);
        let mut beat_ids = Vec::with_capacity(b * t);
        for r in 0..b {
            let lo = r * batch.t_max;
            score_ids.extend_from_slice(&batch.score_ids[lo * 4..(lo + t) * 4]);
            perf_ids.extend_from_slice(&batch.perf_ids[lo * 4..(lo + t) * 4]);
            pv.extend_from_slice(&batch.pv[lo * 4..(lo + t) * 4]);
            beat_ids.extend_from_slice(&batch.beat_ids[lo..lo + t]);
        }
        let lengths: Vec<usize> = batch.lengths.iter().map(|&l| l.min(t)).collect();
        if lengths.contains(&0) {
            return Err(Error::Shape("batch row without steps".into()));
        }
        Ok(Self {
            b,
            t,
            masks: Masks::new(&lengths, t, &beat_ids, dtype, device)?,
            steps: step_mask(&lengths, t, dtype, device)?,
            score_ids,
            perf_ids,
            pv,
            beat_ids,
            lengths,
        })
    }

    pub fn real_steps(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn is_real(&self, row: usize, step: usize) -> bool {
        step < self.lengths[row]
    }
}

/// How the Composer passes the quantized latents to its decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantize {
    /// Forward value of the code, gradient of the projection.
    StraightThrough,
    /// The code itself, a constant: used for finite-difference checks where
    /// the straight-through surrogate has no numerical counterpart.
    Exact,
}

/// Source of the reparameterization noise of the Pianist.
pub enum Noise<'a> {
    Sample(&'a mut ChaCha8Rng),
    Fixed(Tensor),
    /// z_p = mu.
    Mean,
}

pub fn standard_normal(shape: (usize, usize), rng: &mut impl Rng, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f64> = (0..shape.0 * shape.1).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

pub struct Composer {
    pub embed: CompoundEmbedding,
    pub encoder: MultiscaleEncoder,
    pub to_latent: Linear,
    pub from_latent: Linear,
    pub start: Tensor,
    pub decoder: OrthogonalDecoder,
}

pub struct ComposerOutput {
    /// Projected encoder states before quantization: (B, T, d_z).
    pub projected: Tensor,
    /// Code index of every step, padding included: B * T.
    pub codes: Vec<u32>,
    /// Code vectors: (B, T, d_z).
    pub quantized: Tensor,
    /// What the decoder received: straight-through or exact codes.
    pub latent: Tensor,
    pub logits: Vec<Tensor>,
}

pub struct Pianist {
    pub embed: CompoundEmbedding,
    pub pv: PvEmbedding,
    pub encoder: MultiscaleEncoder,
    pub mu: Linear,
    pub logvar: Linear,
    pub start: Tensor,
    pub zs_input: Linear,
    pub zs_memory: Linear,
    pub zp_memory: Linear,
    pub decoder: OrthogonalDecoder,
}

pub struct PianistOutput {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub zp: Tensor,
    pub logits: Vec<Tensor>,
}

pub struct Output {
    pub composer: ComposerOutput,
    pub pianist: PianistOutput,
}

pub struct Xmvae {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub codebook: Codebook,
    pub composer: Composer,
    pub pianist: Pianist,
}

fn decoder_shape(c: &ModelConfig, vocab: [usize; 4]) -> DecoderShape {
    DecoderShape {
        d: c.d,
        heads: c.heads,
        ffn: c.ffn,
        temporal_layers: c.temporal_decoder_layers,
        subtoken_layers: c.subtoken_decoder_layers,
        vocab,
        std: c.init_std,
    }
}

impl Composer {
    fn new(s: &mut Scope, c: &ModelConfig) -> Result<Self> {
        let std = c.init_std;
        Ok(Self {
            embed: CompoundEmbedding::new(s, "embed", c.vocab.score, c.d, std)?,
            encoder: MultiscaleEncoder::new(s, "encoder", c.encoder_layers, c.d, c.heads, c.ffn, std)?,
            to_latent: Linear::new(s, "to_latent", c.d, c.d_z, std)?,
            from_latent: Linear::new(s, "from_latent", c.d_z, c.d, std)?,
            start: s.create("start", &[c.d], Init::Normal(std))?,
            decoder: OrthogonalDecoder::new(s, "decoder", &decoder_shape(c, c.vocab.score))?,
        })
    }
}

impl Pianist {
    fn new(s: &mut Scope, c: &ModelConfig) -> Result<Self> {
        let std = c.init_std;
        Ok(Self {
            embed: CompoundEmbedding::new(s, "embed", c.vocab.perf, c.d, std)?,
            pv: PvEmbedding::new(s, "pv", c.d, std)?,
            encoder: MultiscaleEncoder::new(s, "encoder", c.encoder_layers, c.d, c.heads, c.ffn, std)?,
            mu: Linear::new(s, "mu", c.d, c.d_z, std)?,
            logvar: Linear::new(s, "logvar", c.d, c.d_z, std)?,
            start: s.create("start", &[c.d], Init::Normal(std))?,
            zs_input: Linear::new(s, "zs_input", c.d_z, c.d, std)?,
            zs_memory: Linear::new(s, "zs_memory", c.d_z, c.d, std)?,
            zp_memory: Linear::new(s, "zp_memory", c.d_z, c.d, std)?,
            decoder: OrthogonalDecoder::new(s, "decoder", &decoder_shape(c, c.vocab.perf))?,
        })
    }
}

pub fn tensor_to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

impl Xmvae {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let composer = Composer::new(&mut store.scope("composer"), &config)?;
        let pianist = Pianist::new(&mut store.scope("pianist"), &config)?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0x5eed_c0de);
        let codebook = Codebook::new(
            config.codebook_size,
            config.d_z,
            config.ema_decay,
            config.ema_epsilon,
            &mut rng,
            dtype,
            device,
        )?;
        Ok(Self {
            config,
            store,
            codebook,
            composer,
            pianist,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    fn pe(&self, t: usize) -> Result<Tensor> {
        position_encoding(t, self.config.d, self.dtype(), self.device())
    }

    /// Projected encoder states of the score tokens: (B, T, d_z).
    pub fn encode_score(&self, inp: &Inputs) -> Result<Tensor> {
        let c = &self.composer;
        let f = c.embed.forward(&inp.score_ids, inp.b, inp.t, self.device())?;
        let e = c.encoder.forward(&f.broadcast_add(&self.pe(inp.t)?)?, &inp.masks)?;
        c.to_latent.forward(&e)
    }

    /// Nearest-code indices of projected states, one per step.
    pub fn quantize(&self, projected: &Tensor) -> Result<(Vec<u32>, Tensor)> {
        let (b, t, dz) = projected.dims3()?;
        let codes = self.codebook.assign(&tensor_to_f64(projected)?);
        let idx = Tensor::from_vec(codes.clone(), b * t, self.device())?;
        let quantized = self.codebook.lookup(&idx)?.reshape((b, t, dz))?;
        Ok((codes, quantized))
    }

    /// Code vectors for host-side indices: (B, T, d_z).
    pub fn codes_to_latent(&self, codes: &[u32], b: usize, t: usize) -> Result<Tensor> {
        if let Some(&c) = codes.iter().find(|&&c| c as usize >= self.codebook.k) {
            return Err(Error::Config(format!("code {c} outside a codebook of {}", self.codebook.k)));
        }
        let idx = Tensor::from_vec(codes.to_vec(), b * t, self.device())?;
        Ok(self.codebook.lookup(&idx)?.reshape((b, t, self.config.d_z))?)
    }

    /// Decoder memory built from latent codes: (B, T, d).
    pub fn score_memory(&self, latent: &Tensor) -> Result<Tensor> {
        let t = latent.dim(1)?;
        Ok(self.composer.from_latent.forward(latent)?.broadcast_add(&self.pe(t)?)?)
    }

    /// Right-shifted score decoder inputs with position encoding.
    pub fn score_decoder_input(&self, score_ids: &[u32], b: usize, t: usize) -> Result<Tensor> {
        let c = &self.composer;
        let f = c.embed.forward(score_ids, b, t, self.device())?;
        Ok(shift_right(&f, &c.start)?.broadcast_add(&self.pe(t)?)?)
    }

    pub fn composer_forward(&self, inp: &Inputs, mode: Quantize) -> Result<ComposerOutput> {
        let projected = self.encode_score(inp)?;
        let (codes, quantized) = self.quantize(&projected)?;
        let latent = match mode {
            Quantize::StraightThrough => {
                (quantized.detach() + (&projected - projected.detach())?)?
            }
            Quantize::Exact => quantized.detach(),
        };
        let memory = self.score_memory(&latent)?;
        let x = self.score_decoder_input(&inp.score_ids, inp.b, inp.t)?;
        let logits = self.composer.decoder.forward(
            &x,
            &memory,
            &inp.masks.causal,
            Some(&inp.masks.padding),
            &inp.score_ids,
            &self.composer.embed,
        )?;
        Ok(ComposerOutput {
            projected,
            codes,
            quantized,
            latent,
            logits,
        })
    }

    /// Posterior parameters of the performance latent: (B, d_z) each.
    pub fn encode_performance(&self, inp: &Inputs) -> Result<(Tensor, Tensor)> {
        let p = &self.pianist;
        let dev = self.device();
        let f = (p.embed.forward(&inp.perf_ids, inp.b, inp.t, dev)?
            + p.pv.forward(&inp.pv, inp.b, inp.t, dev)?)?;
        let e = p.encoder.forward(&f.broadcast_add(&self.pe(inp.t)?)?, &inp.masks)?;
        let counts: Vec<f64> = inp.lengths.iter().map(|&l| l as f64).collect();
        let counts = Tensor::from_vec(counts, (inp.b, 1), dev)?.to_dtype(self.dtype())?;
        let pooled = e.broadcast_mul(&inp.steps)?.sum(1)?.broadcast_div(&counts)?;
        Ok((p.mu.forward(&pooled)?, p.logvar.forward(&pooled)?))
    }

    pub fn sample_latent(&self, mu: &Tensor, logvar: &Tensor, noise: Noise) -> Result<Tensor> {
        let eps = match noise {
            Noise::Mean => return Ok(mu.clone()),
            Noise::Fixed(e) => e,
            Noise::Sample(rng) => standard_normal(mu.dims2()?, rng, self.dtype(), self.device())?,
        };
        Ok((mu + (logvar * 0.5)?.exp()?.mul(&eps)?)?)
    }

    /// Performance decoder memory: (B, T, d).
    pub fn performance_memory(&self, zs: &Tensor, zp: &Tensor) -> Result<Tensor> {
        let p = &self.pianist;
        let t = zs.dim(1)?;
        Ok(p.zs_memory
            .forward(zs)?
            .broadcast_add(&self.pe(t)?)?
            .broadcast_add(&p.zp_memory.forward(zp)?.unsqueeze(1)?)?)
    }

    /// Right-shifted performance decoder inputs plus the latent sequence.
    pub fn performance_decoder_input(&self, perf_ids: &[u32], zs: &Tensor) -> Result<Tensor> {
        let p = &self.pianist;
        let (b, t, _) = zs.dims3()?;
        let f = p.embed.forward(perf_ids, b, t, self.device())?;
        Ok((shift_right(&f, &p.start)? + p.zs_input.forward(zs)?)?.broadcast_add(&self.pe(t)?)?)
    }

    /// `zs` is treated as given features: gradients stop at it.
    pub fn pianist_forward(&self, inp: &Inputs, zs: &Tensor, noise: Noise) -> Result<PianistOutput> {
        if zs.dims3()?.1 != inp.t {
            return Err(Error::Shape(format!("latent length {} for {} steps", zs.dims3()?.1, inp.t)));
        }
        let zs = zs.detach();
        let (mu, logvar) = self.encode_performance(inp)?;
        let zp = self.sample_latent(&mu, &logvar, noise)?;
        let memory = self.performance_memory(&zs, &zp)?;
        let x = self.performance_decoder_input(&inp.perf_ids, &zs)?;
        let logits = self.pianist.decoder.forward(
            &x,
            &memory,
            &inp.masks.causal,
            Some(&inp.masks.padding),
            &inp.perf_ids,
            &self.pianist.embed,
        )?;
        Ok(PianistOutput { mu, logvar, zp, logits })
    }

    pub fn forward(&self, inp: &Inputs, mode: Quantize, noise: Noise) -> Result<Output> {
        let composer = self.composer_forward(inp, mode)?;
        let pianist = self.pianist_forward(inp, &composer.quantized, noise)?;
        Ok(Output { composer, pianist })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use xmvae_core::{encode_score, QuantizationSpec, ScoreNote};

    fn tiny_batch() -> Batch {
        let spec = QuantizationSpec::default();
        let notes: Vec<ScoreNote> = (0..6)
            .map(|i| ScoreNote::new(format!("n{i}"), 60 + i as u8, i as f64 * 0.5, 0.5).unwrap())
            .collect();
        let a = encode_score(&notes, &spec);
        let b = encode_score(&notes[..3], &spec);
        Batch::from_sequences(&[&a, &b], vec![0, 1])
    }

    fn model(dtype: DType) -> Xmvae {
        Xmvae::new(ModelConfig::tiny(), 0, dtype, &Device::Cpu).unwrap()
    }

    #[test]
    fn shapes() {
        let m = model(DType::F32);
        let batch = tiny_batch();
        let inp = Inputs::from_batch(&batch, 512, DType::F32, &Device::Cpu).unwrap();
        let out = m.forward(&inp, Quantize::StraightThrough, Noise::Mean).unwrap();
        let t = batch.t_max;
        for (l, v) in out.composer.logits.iter().zip([5, 25, 89, 52]) {
            assert_eq!(l.dims(), &[2, t, v]);
        }
        for (l, v) in out.pianist.logits.iter().zip([162, 33, 42, 82]) {
            assert_eq!(l.dims(), &[2, t, v]);
        }
        assert_eq!(out.pianist.mu.dims(), &[2, 32]);
        assert_eq!(out.composer.codes.len(), 2 * t);
    }

    #[test]
    fn mean_mode_returns_mu() {
        let m = model(DType::F32);
        let inp = Inputs::from_batch(&tiny_batch(), 512, DType::F32, &Device::Cpu).unwrap();
        let (mu, lv) = m.encode_performance(&inp).unwrap();
        let z = m.sample_latent(&mu, &lv, Noise::Mean).unwrap();
        assert_eq!(tensor_to_f64(&z).unwrap(), tensor_to_f64(&mu).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = m.sample_latent(&mu, &lv, Noise::Sample(&mut rng)).unwrap();
        assert_ne!(tensor_to_f64(&s).unwrap(), tensor_to_f64(&mu).unwrap());
    }

    #[test]
    fn quantized_rows_are_codebook_rows() {
        let m = model(DType::F32);
        let inp = Inputs::from_batch(&tiny_batch(), 512, DType::F32, &Device::Cpu).unwrap();
        let out = m.composer_forward(&inp, Quantize::StraightThrough).unwrap();
        let q = out.quantized.flatten_to(1).unwrap().to_vec2::<f32>().unwrap();
        for (row, &k) in q.iter().zip(&out.codes) {
            let code: Vec<f32> = m.codebook.vector(k as usize).iter().map(|&v| v as f32).collect();
            assert_eq!(row, &code);
        }
    }

    #[test]
    fn padding_is_excluded_from_pooling() {
        let m = model(DType::F64);
        let spec = QuantizationSpec::default();
        let long: Vec<ScoreNote> = (0..8)
            .map(|i| ScoreNote::new(format!("n{i}"), 60, i as f64, 1.0).unwrap())
            .collect();
        let a = encode_score(&long, &spec);
        let b = encode_score(&long[..2], &spec);
        let both = Inputs::from_batch(&Batch::from_sequences(&[&a, &b], vec![0, 1]), 512, DType::F64, &Device::Cpu)
            .unwrap();
        let alone = Inputs::from_batch(&Batch::from_sequences(&[&b], vec![1]), 512, DType::F64, &Device::Cpu).unwrap();
        let (mu_both, _) = m.encode_performance(&both).unwrap();
        let (mu_alone, _) = m.encode_performance(&alone).unwrap();
        let x = tensor_to_f64(&mu_both.get(1).unwrap()).unwrap();
        let y = tensor_to_f64(&mu_alone).unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
