use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

/// Adam with global gradient-norm clipping. Moments are kept per variable
/// in the variable's dtype.
pub struct Adam {
    pub names: Vec<String>,
    vars: Vec<Var>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: &TrainConfig) -> Result<Self> {
        let mut names = Vec::with_capacity(vars.len());
        let mut vs = Vec::with_capacity(vars.len());
        let mut m = Vec::with_capacity(vars.len());
        let mut v = Vec::with_capacity(vars.len());
        for (name, var) in vars {
            m.push(var.as_tensor().zeros_like()?);
            v.push(var.as_tensor().zeros_like()?);
            names.push(name);
            vs.push(var);
        }
        Ok(Self {
            names,
            vars: vs,
            m,
            v,
            t: 0,
            beta1: config.adam_betas.0,
            beta2: config.adam_betas.1,
            eps: config.adam_eps,
            clip: config.clip_norm,
        })
    }

    /// Global L2 norm of the available gradients.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for var in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update. Returns the gradient norm before clipping. Variables
    /// without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<f64> {
        let norm = self.grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient norm".into(),
                epoch: 0,
                step: self.t as usize,
            });
        }
        let scale = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..self.vars.len() {
            let Some(g) = grads.get(self.vars[i].as_tensor()) else {
                continue;
            };
            let g = (g * scale)?;
            self.m[i] = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            self.v[i] = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&self.m[i] / c1)?;
            let v_hat = (&self.v[i] / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let var = &self.vars[i];
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(norm)
    }

    /// Restores moments saved under the same variable names.
    pub fn load_state(&mut self, t: u64, moments: impl Fn(&str) -> Option<(Tensor, Tensor)>) -> Result<()> {
        for i in 0..self.names.len() {
            let (m, v) = moments(&self.names[i]).ok_or_else(|| {
                Error::Config(format!("optimizer state for {} missing", self.names[i]))
            })?;
            let dtype = self.m[i].dtype();
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(Error::Config(format!("optimizer state for {} has the wrong shape", self.names[i])));
            }
            self.m[i] = m.to_dtype(dtype)?;
            self.v[i] = v.to_dtype(dtype)?;
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn quadratic(lr: f64, steps: usize) -> Vec<f64> {
        let x = Var::new(&[3.0f64, -2.0], &Device::Cpu).unwrap();
        let mut adam = Adam::new(vec![("x".into(), x.clone())], &TrainConfig::default()).unwrap();
        for _ in 0..steps {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            adam.step(&loss.backward().unwrap(), lr).unwrap();
        }
        x.as_tensor().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        assert_eq!(quadratic(0.0, 5), vec![3.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias-corrected first step is lr * sign(g) whatever the gradient size
        let x = quadratic(0.1, 1);
        assert!((x[0] - 2.9).abs() < 1e-9);
        assert!((x[1] + 1.9).abs() < 1e-9);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let x = quadratic(0.05, 600);
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn clipping_scales_the_gradient() {
        let x = Var::new(&[30.0f64, 40.0], &Device::Cpu).unwrap();
        let adam = Adam::new(vec![("x".into(), x.clone())], &TrainConfig::default()).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let norm = adam.grad_norm(&loss.backward().unwrap()).unwrap();
        assert!((norm - 100.0).abs() < 1e-9);
    }
}
