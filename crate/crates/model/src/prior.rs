//! Autoregressive prior over code-index sequences.
//!
//! Sequences are framed as `BOS, codes..., EOS` with the sentinels at ids
//! `K` and `K + 1`.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xmvae_core::dataset::{batch_indices, Batch, SegmentedDataset};

use crate::checkpoint::{dtype_name, parse_dtype, read_archive, restore_params, write_archive, Meta, KIND_PRIOR};
use crate::config::{PriorConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::loss::scalar;
use crate::nn::{additive_mask, position_encoding, Attention, FeedForward, LayerNorm, Linear};
use crate::optim::Adam;
use crate::params::{Init, ParamStore};
use crate::xmvae::{Inputs, Xmvae};

struct PriorLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorShape {
    pub config: PriorConfig,
    /// Codebook size K.
    pub codes: usize,
    /// Longest code body.
    pub max_len: usize,
}

pub struct Prior {
    pub shape: PriorShape,
    pub store: ParamStore,
    embed: Tensor,
    layers: Vec<PriorLayer>,
    ln: LayerNorm,
    head: Linear,
}

impl Prior {
    pub fn new(shape: PriorShape, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        shape.config.validate()?;
        let c = shape.config.clone();
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let vocab = shape.codes + 2;
        let mut s = store.scope("prior");
        let embed = s.create("embed", &[vocab, c.d], Init::Normal(c.init_std))?;
        let layers = (0..c.layers)
            .map(|i| {
                let mut l = s.sub(&format!("layer{i}"));
                Ok(PriorLayer {
                    ln1: LayerNorm::new(&mut l, "ln1", c.d)?,
                    attn: Attention::new(&mut l, "attn", c.d, c.heads, c.init_std)?,
                    ln2: LayerNorm::new(&mut l, "ln2", c.d)?,
                    ffn: FeedForward::new(&mut l, "ffn", c.d, c.ffn, c.init_std)?,
                })
            })
            .collect::<Result<_>>()?;
        let ln = LayerNorm::new(&mut s, "ln", c.d)?;
        let head = Linear::new(&mut s, "head", c.d, vocab, c.init_std)?;
        Ok(Self {
            shape,
            store,
            embed,
            layers,
            ln,
            head,
        })
    }

    pub fn bos(&self) -> u32 {
        self.shape.codes as u32
    }

    pub fn eos(&self) -> u32 {
        self.shape.codes as u32 + 1
    }

    pub fn vocab(&self) -> usize {
        self.shape.codes + 2
    }

    /// Logits (B, T, K + 2) for right-padded id rows of equal length `t`.
    pub fn logits(&self, ids: &[u32], b: usize, t: usize, lengths: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab()) {
            return Err(Error::Config(format!("prior id {bad} outside a vocabulary of {}", self.vocab())));
        }
        let dtype = self.store.dtype;
        let device = &self.store.device;
        let d = self.shape.config.d;
        let idx = Tensor::from_vec(ids.to_vec(), b * t, device)?;
        let x = self.embed.index_select(&idx, 0)?.reshape((b, t, d))?;
        let mut x = x.broadcast_add(&position_encoding(t, d, dtype, device)?)?;
        let mask = additive_mask(b, t, t, dtype, device, |r, i, j| j <= i && j < lengths[r])?;
        for layer in &self.layers {
            let h = layer.ln1.forward(&x)?;
            x = (&x + layer.attn.forward(&h, &h, Some(&mask))?)?;
            let h = layer.ln2.forward(&x)?;
            x = (&x + layer.ffn.forward(&h)?)?;
        }
        self.head.forward(&self.ln.forward(&x)?)
    }

    fn frame(&self, codes: &[u32]) -> Vec<u32> {
        let body = &codes[..codes.len().min(self.shape.max_len)];
        let mut seq = Vec::with_capacity(body.len() + 2);
        seq.push(self.bos());
        seq.extend_from_slice(body);
        seq.push(self.eos());
        seq
    }

    /// Mean next-index cross-entropy over the framed sequences, and the
    /// number of predicted positions.
    pub fn nll(&self, sequences: &[&[u32]]) -> Result<(Tensor, usize)> {
        let framed: Vec<Vec<u32>> = sequences.iter().map(|s| self.frame(s)).collect();
        let b = framed.len();
        let t = framed.iter().map(|f| f.len() - 1).max().unwrap_or(0);
        let mut inputs = vec![self.eos(); b * t];
        let mut targets = vec![0u32; b * t];
        let mut weights = vec![0.0f64; b * t];
        let lengths: Vec<usize> = framed.iter().map(|f| f.len() - 1).collect();
        for (r, f) in framed.iter().enumerate() {
            for i in 0..f.len() - 1 {
                inputs[r * t + i] = f[i];
                targets[r * t + i] = f[i + 1];
                weights[r * t + i] = 1.0;
            }
        }
        let logits = self.logits(&inputs, b, t, &lengths)?;
        let device = &self.store.device;
        let idx = Tensor::from_vec(targets, (b, t, 1), device)?;
        let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?.gather(&idx, 2)?.squeeze(2)?;
        let w = Tensor::from_vec(weights, (b, t), device)?.to_dtype(self.store.dtype)?;
        let count: usize = lengths.iter().sum();
        Ok((((logp * w)?.sum_all()?.neg()? / count as f64)?, count))
    }

    /// Log-probability of every framed position of one sequence.
    pub fn stepwise_log_probs(&self, codes: &[u32]) -> Result<Vec<f64>> {
        let f = self.frame(codes);
        let t = f.len() - 1;
        let logits = self.logits(&f[..t], 1, t, &[t])?;
        let logp = candle_nn::ops::log_softmax(&logits.to_dtype(DType::F64)?, D::Minus1)?
            .squeeze(0)?
            .to_vec2::<f64>()?;
        Ok((0..t).map(|i| logp[i][f[i + 1] as usize]).collect())
    }

    /// Next-index logits after a BOS-prefixed context, in f64.
    pub fn next_logits(&self, context: &[u32]) -> Result<Vec<f64>> {
        let t = context.len();
        let logits = self.logits(context, 1, t, &[t])?;
        Ok(logits.get(0)?.get(t - 1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// Samples a code body. The prime is kept verbatim; EOS is refused
    /// until the body holds `min_len` codes, and the body stops at EOS or
    /// at `length` codes.
    pub fn sample(
        &self,
        length: usize,
        min_len: usize,
        top_k: usize,
        prime: &[u32],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<u32>> {
        if top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if let Some(&bad) = prime.iter().find(|&&c| c as usize >= self.shape.codes) {
            return Err(Error::Config(format!("prime code {bad} is not a code index")));
        }
        let cap = length.min(self.shape.max_len);
        if prime.len() > cap {
            return Err(Error::Config(format!("prime of {} codes exceeds the cap {cap}", prime.len())));
        }
        let mut context = vec![self.bos()];
        context.extend_from_slice(prime);
        while context.len() - 1 < cap {
            let mut logits = self.next_logits(&context)?;
            logits[self.bos() as usize] = f64::NEG_INFINITY;
            if context.len() - 1 < min_len {
                logits[self.eos() as usize] = f64::NEG_INFINITY;
            }
            let next = top_k_sample(&logits, top_k, rng);
            if next == self.eos() {
                break;
            }
            context.push(next);
        }
        Ok(context[1..].to_vec())
    }
}

/// The `k` highest logits (ties to the lower index), in descending order.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).filter(|&i| logits[i] > f64::NEG_INFINITY).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k.max(1));
    order
}

/// Samples among the top `k` logits after renormalization. `k = 1` is
/// greedy and does not consume randomness.
pub fn top_k_sample(logits: &[f64], k: usize, rng: &mut impl Rng) -> u32 {
    let top = top_k_indices(logits, k);
    if top.len() == 1 {
        return top[0] as u32;
    }
    let max = logits[top[0]];
    let weights: Vec<f64> = top.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (&i, w) in top.iter().zip(&weights) {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    *top.last().expect("non-empty") as u32
}

/// Code indices of every selected segment, one per real step.
pub fn extract_codes(model: &Xmvae, ds: &SegmentedDataset, indices: &[usize], expected_fingerprint: Option<&str>) -> Result<Vec<Vec<u32>>> {
    if let Some(f) = expected_fingerprint {
        if f != ds.fingerprint {
            return Err(Error::Config(format!(
                "dataset fingerprint {} does not match the model ({f})",
                ds.fingerprint
            )));
        }
    }
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(16) {
        let batch = Batch::from_sequences(&ds.sequences(chunk), chunk.to_vec());
        out.extend(codes_of_batch(model, &batch)?);
    }
    Ok(out)
}

pub fn codes_of_batch(model: &Xmvae, batch: &Batch) -> Result<Vec<Vec<u32>>> {
    let inp = Inputs::from_batch(batch, model.config.max_len, model.dtype(), model.device())?;
    let (codes, _) = model.quantize(&model.encode_score(&inp)?)?;
    Ok((0..inp.b)
        .map(|r| codes[r * inp.t..r * inp.t + inp.lengths[r]].to_vec())
        .collect())
}

/// Per-epoch mean training loss.
pub struct PriorFit {
    pub prior: Prior,
    pub losses: Vec<f64>,
}

/// Fits a prior on code sequences with the shared optimizer and schedule.
pub fn fit_prior(
    codes: &[Vec<u32>],
    shape: PriorShape,
    train: &TrainConfig,
    dtype: DType,
    device: &Device,
) -> Result<PriorFit> {
    if codes.is_empty() {
        return Err(Error::Config("empty code corpus".into()));
    }
    train.schedule.validate()?;
    let prior = Prior::new(shape, train.seed, dtype, device)?;
    let mut adam = Adam::new(prior.store.vars_with_prefix(""), train)?;
    let all: Vec<usize> = (0..codes.len()).collect();
    let mut losses = Vec::new();
    for epoch in 1..=train.epochs.min(train.schedule.stop_epoch) {
        let lr = train.schedule.lr_at(epoch)?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for idx in batch_indices(&all, train.batch_size, Some(train.seed.wrapping_add(epoch as u64))) {
            let seqs: Vec<&[u32]> = idx.iter().map(|&i| codes[i].as_slice()).collect();
            let (loss, count) = prior.nll(&seqs)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "prior loss".into(),
                    epoch,
                    step: adam.t as usize,
                });
            }
            adam.step(&loss.backward()?, lr)?;
            sum += value * count as f64;
            n += count;
        }
        losses.push(sum / n as f64);
        log::info!("prior epoch {epoch}: lr {lr:.3e} nll {:.4}", sum / n as f64);
    }
    Ok(PriorFit { prior, losses })
}

/// Saves a prior tagged with the hash of the model checkpoint its codes
/// came from.
pub fn save_prior(path: &Path, prior: &Prior, fingerprint: &str, parent: Option<String>, epochs: usize) -> Result<()> {
    let tensors = prior
        .store
        .vars()
        .iter()
        .map(|(k, v)| (format!("param/{k}"), v.as_tensor().clone()))
        .collect();
    let meta = Meta {
        kind: KIND_PRIOR.into(),
        epoch: epochs,
        step: 0,
        adam_t: 0,
        fingerprint: fingerprint.into(),
        dtype: dtype_name(prior.store.dtype).into(),
        config: serde_json::to_value(&prior.shape)?,
        parent,
        best_validation: None,
    };
    write_archive(path, &tensors, &meta)
}

pub fn load_prior(path: &Path, expected_fingerprint: Option<&str>, device: &Device) -> Result<(Prior, Meta)> {
    let (tensors, meta) = read_archive(path, device)?;
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    if meta.kind != KIND_PRIOR {
        return Err(bad(format!("expected a {KIND_PRIOR} checkpoint, found {}", meta.kind)));
    }
    crate::checkpoint::check_fingerprint(path, &meta, expected_fingerprint)?;
    let shape: PriorShape = serde_json::from_value(meta.config.clone())?;
    let dtype = parse_dtype(&meta.dtype).ok_or_else(|| bad(format!("unknown dtype {}", meta.dtype)))?;
    let prior = Prior::new(shape, 0, dtype, device)?;
    restore_params(path, &prior.store, &tensors)?;
    Ok((prior, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LrSchedule;
    use rand::SeedableRng;

    fn shape() -> PriorShape {
        PriorShape {
            config: PriorConfig::tiny(),
            codes: 8,
            max_len: 32,
        }
    }

    #[test]
    fn causal_logits() {
        let p = Prior::new(shape(), 0, DType::F64, &Device::Cpu).unwrap();
        let a = [8u32, 1, 2, 3, 4, 5];
        let base = p.logits(&a, 1, 6, &[6]).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for t in 0..5 {
            let mut b = a;
            for v in &mut b[t + 1..] {
                *v = (*v + 3) % 8;
            }
            let moved = p.logits(&b, 1, 6, &[6]).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
            assert_eq!(base[..=t], moved[..=t]);
        }
    }

    #[test]
    fn log_probs_add_up() {
        let p = Prior::new(shape(), 1, DType::F64, &Device::Cpu).unwrap();
        let codes = [3u32, 1, 4, 1, 5];
        let steps = p.stepwise_log_probs(&codes).unwrap();
        let (nll, count) = p.nll(&[&codes]).unwrap();
        assert_eq!(count, steps.len());
        let total = -scalar(&nll).unwrap() * count as f64;
        assert!((total - steps.iter().sum::<f64>()).abs() < 1e-10);
        // each step against a separately computed conditional
        let mut context = vec![p.bos()];
        for (i, &c) in codes.iter().enumerate() {
            let l = p.next_logits(&context).unwrap();
            let lse = l.iter().map(|x| x.exp()).sum::<f64>().ln();
            assert!((l[c as usize] - lse - steps[i]).abs() < 1e-10);
            context.push(c);
        }
    }

    #[test]
    fn greedy_ignores_seed_and_sampling_repeats() {
        let p = Prior::new(shape(), 2, DType::F32, &Device::Cpu).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(
            p.sample(12, 4, 1, &[], &mut r1).unwrap(),
            p.sample(12, 4, 1, &[], &mut r2).unwrap()
        );
        let a = p.sample(12, 4, 8, &[2, 2], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = p.sample(12, 4, 8, &[2, 2], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a[..2], &[2, 2]);
        assert!(a.len() >= 4 && a.len() <= 12);
        assert!(a.iter().all(|&c| c < 8));
    }

    #[test]
    fn samples_stay_in_the_top_k() {
        let logits = vec![0.1, 2.0, -1.0, 1.5, 0.0, 3.0];
        let top = top_k_indices(&logits, 3);
        assert_eq!(top, vec![5, 1, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            assert!(top.contains(&(top_k_sample(&logits, 3, &mut rng) as usize)));
        }
        assert_eq!(top_k_indices(&[1.0, 1.0, 0.0], 1), vec![0]);
    }

    #[test]
    fn memorizes_one_sequence() {
        let codes = vec![vec![1u32, 6, 6, 2, 0, 7, 3]; 4];
        let train = TrainConfig {
            epochs: 150,
            batch_size: 4,
            schedule: LrSchedule {
                warmup_epochs: 5,
                peak: 1e-2,
                decay_end_epoch: 150,
                floor: 1e-3,
                stop_epoch: 150,
            },
            ..TrainConfig::default()
        };
        let fit = fit_prior(&codes, shape(), &train, DType::F32, &Device::Cpu).unwrap();
        let nll = *fit.losses.last().unwrap();
        assert!(nll.exp() < 1.05, "perplexity {}", nll.exp());
        let got = fit.prior.sample(32, 0, 1, &[], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(got, codes[0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = Prior::new(shape(), 3, DType::F32, &Device::Cpu).unwrap();
        let path = dir.path().join("prior.safetensors");
        save_prior(&path, &p, "fp", Some("abc".into()), 0).unwrap();
        let (q, meta) = load_prior(&path, Some("fp"), &Device::Cpu).unwrap();
        assert_eq!(meta.parent.as_deref(), Some("abc"));
        assert_eq!(p.next_logits(&[8, 1]).unwrap(), q.next_logits(&[8, 1]).unwrap());
        assert!(load_prior(&path, Some("other"), &Device::Cpu).is_err());
    }
}
