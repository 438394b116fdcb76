//! Vector quantizer with an EMA-maintained codebook.
//!
//! The codebook is not a gradient parameter. Its state lives on the host
//! in f64; the device tensor is rebuilt after every update, rounded to the
//! model dtype, and the nearest-code search runs against those rounded
//! values so that a quantized vector is always bit-identical to its code.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    /// `k * dim`, rounded to `dtype`.
    pub vectors: Vec<f64>,
    pub ema_count: Vec<f64>,
    /// `k * dim`
    pub ema_sum: Vec<f64>,
    pub decay: f64,
    pub epsilon: f64,
    tensor: Tensor,
    dtype: DType,
    device: Device,
}

fn round_to(values: Vec<f64>, dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F64 => values,
        DType::F32 => values.into_iter().map(|v| v as f32 as f64).collect(),
        _ => values,
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    /// Uniform(-1/K, 1/K) initial codes. Each EMA cluster starts with unit
    /// mass at its initial vector.
    pub fn new(
        k: usize,
        dim: usize,
        decay: f64,
        epsilon: f64,
        rng: &mut impl Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Config("empty codebook".into()));
        }
        let a = 1.0 / k as f64;
        let init: Vec<f64> = (0..k * dim).map(|_| rng.random_range(-a..a)).collect();
        Self::from_state(init.clone(), vec![1.0; k], init, decay, epsilon, dtype, device)
    }

    pub fn from_state(
        vectors: Vec<f64>,
        ema_count: Vec<f64>,
        ema_sum: Vec<f64>,
        decay: f64,
        epsilon: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let k = ema_count.len();
        if k == 0 || vectors.len() % k != 0 || vectors.len() != ema_sum.len() || vectors.is_empty() {
            return Err(Error::Config("inconsistent codebook state".into()));
        }
        let dim = vectors.len() / k;
        let vectors = round_to(vectors, dtype);
        let tensor = Tensor::from_vec(vectors.clone(), (k, dim), device)?.to_dtype(dtype)?;
        Ok(Self {
            k,
            dim,
            vectors,
            ema_count,
            ema_sum,
            decay,
            epsilon,
            tensor,
            dtype,
            device: device.clone(),
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    fn refresh(&mut self) -> Result<()> {
        self.vectors = round_to(std::mem::take(&mut self.vectors), self.dtype);
        self.tensor = Tensor::from_vec(self.vectors.clone(), (self.k, self.dim), &self.device)?
            .to_dtype(self.dtype)?;
        Ok(())
    }

    /// Index of the nearest code; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for k in 0..self.k {
            let d = squared_distance(x, self.vector(k));
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    /// Nearest code of every row of a flat `(n * dim)` buffer.
    pub fn assign(&self, rows: &[f64]) -> Vec<u32> {
        rows.chunks(self.dim).map(|r| self.nearest(r) as u32).collect()
    }

    /// Code vectors for a 1-D u32 index tensor: (n, dim).
    pub fn lookup(&self, indices: &Tensor) -> Result<Tensor> {
        Ok(self.tensor.index_select(indices, 0)?)
    }

    /// One EMA step from a batch of encodings and their assignments.
    pub fn ema_update(&mut self, rows: &[f64], assignments: &[u32]) -> Result<()> {
        let (d, k, dim) = (self.decay, self.k, self.dim);
        let mut count = vec![0.0; k];
        let mut sum = vec![0.0; k * dim];
        for (row, &a) in rows.chunks(dim).zip(assignments) {
            let a = a as usize;
            count[a] += 1.0;
            for (s, x) in sum[a * dim..(a + 1) * dim].iter_mut().zip(row) {
                *s += x;
            }
        }
        for i in 0..k {
            self.ema_count[i] = d * self.ema_count[i] + (1.0 - d) * count[i];
        }
        for (m, s) in self.ema_sum.iter_mut().zip(&sum) {
            *m = d * *m + (1.0 - d) * s;
        }
        // Laplace smoothing keeps every denominator positive.
        let total: f64 = self.ema_count.iter().sum();
        let eps = self.epsilon;
        for i in 0..k {
            let n = (self.ema_count[i] + eps) / (total + k as f64 * eps) * total;
            for j in 0..dim {
                self.vectors[i * dim + j] = self.ema_sum[i * dim + j] / n;
            }
        }
        if self.vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("codebook update produced non-finite values".into()));
        }
        self.refresh()
    }

    /// Codes whose EMA count fell below `threshold`.
    pub fn dead_codes(&self, threshold: f64) -> Vec<usize> {
        (0..self.k).filter(|&i| self.ema_count[i] < threshold).collect()
    }

    /// Moves dead codes onto encodings drawn with probability proportional
    /// to their squared distance from the live codebook. Returns the number
    /// of reseeded codes.
    pub fn reseed(&mut self, dead: &[usize], encodings: &[f64], rng: &mut impl Rng) -> Result<usize> {
        let n = encodings.len() / self.dim;
        if dead.is_empty() || n == 0 {
            return Ok(0);
        }
        let mut weight: Vec<f64> = encodings
            .chunks(self.dim)
            .map(|r| squared_distance(r, self.vector(self.nearest(r))))
            .collect();
        for &code in dead {
            let total: f64 = weight.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random_range(0.0..total);
                let mut chosen = n - 1;
                for (i, w) in weight.iter().enumerate() {
                    if u < *w {
                        chosen = i;
                        break;
                    }
                    u -= w;
                }
                chosen
            } else {
                rng.random_range(0..n)
            };
            let row = &encodings[pick * self.dim..(pick + 1) * self.dim];
            self.vectors[code * self.dim..(code + 1) * self.dim].copy_from_slice(row);
            self.ema_sum[code * self.dim..(code + 1) * self.dim].copy_from_slice(row);
            self.ema_count[code] = 1.0;
            weight[pick] = 0.0;
        }
        self.refresh()?;
        Ok(dead.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(k: usize, dim: usize, seed: u64) -> Codebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Codebook::new(k, dim, 0.99, 1e-5, &mut rng, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn exact_code_maps_to_itself() {
        let cb = book(16, 4, 0);
        let v = cb.vector(7).to_vec();
        assert_eq!(cb.nearest(&v), 7);
    }

    #[test]
    fn ties_take_lowest_index() {
        let mut vectors = vec![5.0; 6 * 2];
        vectors[4..6].copy_from_slice(&[1.0, 0.0]);
        vectors[10..12].copy_from_slice(&[-1.0, 0.0]);
        let cb = Codebook::from_state(vectors.clone(), vec![1.0; 6], vectors, 0.99, 1e-5, DType::F64, &Device::Cpu)
            .unwrap();
        assert_eq!(cb.nearest(&[0.0, 0.0]), 2);
    }

    #[test]
    fn lookup_rows_are_bit_identical() {
        let cb = book(8, 3, 1);
        let idx = Tensor::new(&[3u32, 0, 7], &Device::Cpu).unwrap();
        let rows = cb.lookup(&idx).unwrap().to_vec2::<f32>().unwrap();
        for (r, &k) in rows.iter().zip(&[3usize, 0, 7]) {
            let want: Vec<f32> = cb.vector(k).iter().map(|&v| v as f32).collect();
            assert_eq!(r, &want);
        }
    }

    #[test]
    fn constant_assignment_converges_geometrically() {
        // one vector per step on code 0: the gap shrinks by `decay` per step
        // up to the smoothing term
        let mut cb = book(2, 3, 2);
        let v = [0.3, -0.2, 0.7];
        let start: Vec<f64> = cb.vector(0).to_vec();
        for step in 1..=200 {
            cb.ema_update(&v, &[0]).unwrap();
            let predicted = 0.99f64.powi(step);
            let gap = squared_distance(cb.vector(0), &v).sqrt();
            let start_gap = squared_distance(&start, &v).sqrt();
            assert!((gap - predicted * start_gap).abs() < 1e-4, "step {step}");
        }
    }

    #[test]
    fn unused_code_stays_finite() {
        let mut cb = book(4, 2, 3);
        for _ in 0..3000 {
            cb.ema_update(&[0.1, 0.1], &[0]).unwrap();
        }
        assert!(cb.vectors.iter().all(|v| v.is_finite()));
        assert!(cb.vector(3).iter().all(|v| v.abs() < 1e-3));
        assert_eq!(cb.dead_codes(1e-3), vec![1, 2, 3]);
    }

    #[test]
    fn reseed_moves_dead_codes_onto_data() {
        let mut cb = book(4, 2, 4);
        let data = [5.0, 5.0, -5.0, 5.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(cb.reseed(&[1, 2], &data, &mut rng).unwrap(), 2);
        let mut moved = [cb.vector(1).to_vec(), cb.vector(2).to_vec()];
        moved.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(moved, [vec![-5.0, 5.0], vec![5.0, 5.0]]);
        assert_eq!(cb.ema_count[1], 1.0);
    }

    proptest! {
        #[test]
        fn assignment_matches_exhaustive_search(seed in 0u64..1000, x in prop::collection::vec(-0.1f64..0.1, 4)) {
            let cb = book(32, 4, seed);
            let got = cb.nearest(&x);
            let d = |k: usize| (0..4).map(|j| (x[j] - cb.vectors[k * 4 + j]).powi(2)).sum::<f64>();
            for k in 0..32 {
                prop_assert!(d(got) <= d(k));
                if k < got {
                    prop_assert!(d(k) > d(got));
                }
            }
        }
    }
}
