//! Training objectives. Cross-entropy is pooled over the valid targets of a
//! branch: real steps whose target id is not IGNORE.

use candle_core::{DType, Tensor, D};
use xmvae_core::token::IGNORE;

use crate::error::Result;
use crate::xmvae::{ComposerOutput, Inputs, Output};

pub struct CrossEntropy {
    /// Mean negative log-likelihood over valid targets (0 without any).
    pub loss: Tensor,
    pub count: usize,
    pub correct: usize,
    /// (correct, count) per sub-token column.
    pub columns: [(usize, usize); 4],
}

fn valid_weights(targets: &[u32], column: usize, inp: &Inputs) -> Vec<f64> {
    let mut w = vec![0.0; inp.b * inp.t];
    for r in 0..inp.b {
        for s in 0..inp.lengths[r] {
            let i = r * inp.t + s;
            if targets[i * 4 + column] != IGNORE {
                w[i] = 1.0;
            }
        }
    }
    w
}

/// `logits`: four (B, T, V_j) tensors; `targets`: flat (B * T * 4) ids.
pub fn masked_cross_entropy(logits: &[Tensor], targets: &[u32], inp: &Inputs) -> Result<CrossEntropy> {
    let device = logits[0].device();
    let dtype = logits[0].dtype();
    let mut total: Option<Tensor> = None;
    let mut columns = [(0usize, 0usize); 4];
    for (j, l) in logits.iter().enumerate() {
        let w = valid_weights(targets, j, inp);
        let count = w.iter().filter(|&&x| x > 0.0).count();
        if count == 0 {
            continue;
        }
        let column: Vec<u32> = targets.iter().skip(j).step_by(4).copied().collect();
        let predicted = l.argmax(D::Minus1)?.flatten_all()?.to_vec1::<u32>()?;
        let correct = predicted
            .iter()
            .zip(&column)
            .zip(&w)
            .filter(|((p, t), w)| **w > 0.0 && p == t)
            .count();
        columns[j] = (correct, count);

        let idx = Tensor::from_vec(column, (inp.b, inp.t, 1), device)?;
        let logp = candle_nn::ops::log_softmax(l, D::Minus1)?.gather(&idx, 2)?.squeeze(2)?;
        let w = Tensor::from_vec(w, (inp.b, inp.t), device)?.to_dtype(dtype)?;
        let nll = (logp * w)?.sum_all()?.neg()?;
        total = Some(match total {
            Some(acc) => (acc + nll)?,
            None => nll,
        });
    }
    let count: usize = columns.iter().map(|c| c.1).sum();
    let correct: usize = columns.iter().map(|c| c.0).sum();
    let loss = match total {
        Some(t) => (t / count as f64)?,
        None => Tensor::zeros((), dtype, device)?,
    };
    Ok(CrossEntropy {
        loss,
        count,
        correct,
        columns,
    })
}

/// `alpha * mean over real steps of |projected - sg(code)|^2`.
pub fn commitment(projected: &Tensor, quantized: &Tensor, inp: &Inputs, alpha: f64) -> Result<Tensor> {
    let diff = (projected - quantized.detach())?.sqr()?.sum_keepdim(D::Minus1)?;
    let total = diff.broadcast_mul(&inp.steps)?.sum_all()?;
    Ok((total * (alpha / inp.real_steps() as f64))?)
}

/// KL(N(mu, exp(logvar)) || N(0, I)), summed over dimensions and averaged
/// over the batch.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let b = mu.dim(0)?;
    let terms = ((mu.sqr()? + logvar.exp()?)? - logvar)?;
    let terms = (terms - 1.0)?;
    Ok((terms.sum_all()? * (0.5 / b as f64))?)
}

pub struct Losses {
    pub score: CrossEntropy,
    pub perf: CrossEntropy,
    pub commitment: Tensor,
    pub kl: Tensor,
    pub l_s: Tensor,
    pub l_p: Tensor,
    pub total: Tensor,
}

pub struct ComposerLosses {
    pub score: CrossEntropy,
    pub commitment: Tensor,
    pub l_s: Tensor,
}

pub fn composer_losses(out: &ComposerOutput, inp: &Inputs, alpha: f64) -> Result<ComposerLosses> {
    let score = masked_cross_entropy(&out.logits, &inp.score_ids, inp)?;
    let commitment = commitment(&out.projected, &out.quantized, inp, alpha)?;
    let l_s = (&score.loss + &commitment)?;
    Ok(ComposerLosses {
        score,
        commitment,
        l_s,
    })
}

pub fn compute_losses(out: &Output, inp: &Inputs, alpha: f64, beta: f64) -> Result<Losses> {
    let ComposerLosses {
        score,
        commitment,
        l_s,
    } = composer_losses(&out.composer, inp, alpha)?;
    let perf = masked_cross_entropy(&out.pianist.logits, &inp.perf_ids, inp)?;
    let kl = kl_divergence(&out.pianist.mu, &out.pianist.logvar)?;
    let l_p = (&perf.loss + (&kl * beta)?)?;
    let total = (&l_s + &l_p)?;
    Ok(Losses {
        score,
        perf,
        commitment,
        kl,
        l_s,
        l_p,
        total,
    })
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Host-side values of one step, as logged.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossRecord {
    pub score_ce: f64,
    pub perf_ce: f64,
    pub commitment: f64,
    pub kl: f64,
    pub l_s: f64,
    pub l_p: f64,
    pub total: f64,
    pub score_correct: usize,
    pub score_count: usize,
    pub perf_correct: usize,
    pub perf_count: usize,
}

impl LossRecord {
    pub fn from_losses(l: &Losses) -> Result<Self> {
        Ok(Self {
            score_ce: scalar(&l.score.loss)?,
            perf_ce: scalar(&l.perf.loss)?,
            commitment: scalar(&l.commitment)?,
            kl: scalar(&l.kl)?,
            l_s: scalar(&l.l_s)?,
            l_p: scalar(&l.l_p)?,
            total: scalar(&l.total)?,
            score_correct: l.score.correct,
            score_count: l.score.count,
            perf_correct: l.perf.correct,
            perf_count: l.perf.count,
        })
    }

    pub fn score_accuracy(&self) -> f64 {
        self.score_correct as f64 / self.score_count.max(1) as f64
    }

    pub fn perf_accuracy(&self) -> f64 {
        self.perf_correct as f64 / self.perf_count.max(1) as f64
    }

    /// Step-weighted accumulation for epoch summaries.
    pub fn accumulate(&mut self, other: &LossRecord, weight: f64) {
        self.score_ce += other.score_ce * weight;
        self.perf_ce += other.perf_ce * weight;
        self.commitment += other.commitment * weight;
        self.kl += other.kl * weight;
        self.l_s += other.l_s * weight;
        self.l_p += other.l_p * weight;
        self.total += other.total * weight;
        self.score_correct += other.score_correct;
        self.score_count += other.score_count;
        self.perf_correct += other.perf_correct;
        self.perf_count += other.perf_count;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use xmvae_core::dataset::Batch;

    fn inputs(lengths: &[usize], t: usize) -> Inputs {
        let b = lengths.len();
        let batch = Batch {
            size: b,
            t_max: t,
            score_ids: vec![1; b * t * 4],
            perf_ids: vec![1; b * t * 4],
            pv: vec![0.0; b * t * 4],
            beat_ids: vec![0; b * t],
            mask: vec![true; b * t],
            lengths: lengths.to_vec(),
            sources: (0..b).collect(),
        };
        Inputs::from_batch(&batch, 512, DType::F64, &Device::Cpu).unwrap()
    }

    fn logits(b: usize, t: usize, v: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..b * t * v).map(|_| n.sample(&mut rng)).collect();
        Tensor::from_vec(x, (b, t, v), &Device::Cpu).unwrap()
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        let inp = inputs(&[2], 2);
        let l = logits(1, 2, 3, 0);
        let rows = l.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let targets = vec![2, 0, 0, 0, 1, 0, 0, 0];
        let all: Vec<Tensor> = (0..4).map(|_| l.clone()).collect();
        let ce = masked_cross_entropy(&all, &targets, &inp).unwrap();
        let nll = |r: &[f64], k: usize| {
            let lse = r.iter().map(|x| x.exp()).sum::<f64>().ln();
            lse - r[k]
        };
        let want = (nll(&rows[0], 2) + nll(&rows[1], 1)) / 2.0;
        assert_eq!(ce.count, 2);
        assert!((scalar(&ce.loss).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn padding_and_ignore_contribute_nothing() {
        let inp = inputs(&[3, 1], 3);
        let base = logits(2, 3, 4, 1);
        let targets: Vec<u32> = (0..2 * 3).flat_map(|i| [1 + (i % 3) as u32, 0, 2, 0]).collect();
        let ce = |l: &Tensor| {
            let all: Vec<Tensor> = (0..4).map(|_| l.clone()).collect();
            scalar(&masked_cross_entropy(&all, &targets, &inp).unwrap().loss).unwrap()
        };
        let mut data = base.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // row 1, steps 1 and 2 are padding
        for v in &mut data[(3 + 1) * 4..] {
            *v = 50.0 * *v + 3.0;
        }
        let moved = Tensor::from_vec(data, (2, 3, 4), &Device::Cpu).unwrap();
        assert_eq!(ce(&base), ce(&moved));
    }

    #[test]
    fn perfect_logits_drive_loss_to_zero() {
        let inp = inputs(&[2], 2);
        let targets = vec![1, 2, 3, 0, 2, 1, 1, 3];
        let all: Vec<Tensor> = (0..4)
            .map(|j| {
                let mut x = vec![0.0f64; 2 * 5];
                for s in 0..2 {
                    x[s * 5 + targets[s * 4 + j] as usize] = 200.0;
                }
                Tensor::from_vec(x, (1, 2, 5), &Device::Cpu).unwrap()
            })
            .collect();
        let ce = masked_cross_entropy(&all, &targets, &inp).unwrap();
        assert!(scalar(&ce.loss).unwrap() < 1e-60);
        assert_eq!(ce.correct, ce.count);
        assert_eq!(ce.count, 7);
    }

    #[test]
    fn commitment_zero_on_codes() {
        let inp = inputs(&[2], 2);
        let q = Tensor::new(&[[[0.5f64, -1.0], [2.0, 0.0]]], &Device::Cpu).unwrap();
        assert_eq!(scalar(&commitment(&q, &q, &inp, 0.25).unwrap()).unwrap(), 0.0);
        let p = (q.clone() + 1.0).unwrap();
        // two steps, each |1,1|^2 = 2
        assert_eq!(scalar(&commitment(&p, &q, &inp, 0.25).unwrap()).unwrap(), 0.5);
    }

    #[test]
    fn kl_zero_only_at_standard_normal() {
        let z = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(scalar(&kl_divergence(&z, &z).unwrap()).unwrap(), 0.0);
        let mu = Tensor::new(&[[0.1f64, 0.0, 0.0]], &Device::Cpu).unwrap();
        let lv = Tensor::new(&[[0.0f64, 0.3, -0.2]], &Device::Cpu).unwrap();
        assert!(scalar(&kl_divergence(&mu, &lv).unwrap()).unwrap() > 0.0);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // E_q[log q(z) - log p(z)] over 1e5 samples, within 3 standard errors
        let mu = [0.7, -0.3];
        let lv = [0.4f64, -0.9];
        let closed = scalar(
            &kl_divergence(
                &Tensor::new(&[mu], &Device::Cpu).unwrap(),
                &Tensor::new(&[lv], &Device::Cpu).unwrap(),
            )
            .unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let std = Normal::new(0.0, 1.0).unwrap();
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                (0..2)
                    .map(|k| {
                        let sd = (0.5 * lv[k]).exp();
                        let e: f64 = std.sample(&mut rng);
                        let z = mu[k] + sd * e;
                        let log_q = -0.5 * e * e - sd.ln();
                        let log_p = -0.5 * z * z;
                        log_q - log_p
                    })
                    .sum()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - closed).abs() < 3.0 * se, "mc {mean} closed {closed} se {se}");
    }
}
