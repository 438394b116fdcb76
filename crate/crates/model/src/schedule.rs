use crate::config::LrSchedule;
use crate::error::{Error, Result};

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

impl LrSchedule {
    /// Learning rate at `epoch`: linear warmup from 0 over
    /// `[0, warmup_epochs)`, linear decay to `floor` over
    /// `[warmup_epochs, decay_end_epoch]`, then constant until
    /// `stop_epoch`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.stop_epoch {
            return Err(Error::ScheduleEnded {
                epoch,
                stop: self.stop_epoch,
            });
        }
        let e = epoch as f64;
        Ok(if epoch < self.warmup_epochs {
            self.peak * e / self.warmup_epochs as f64
        } else if epoch <= self.decay_end_epoch {
            let span = (self.decay_end_epoch - self.warmup_epochs).max(1) as f64;
            lerp(self.peak, self.floor, (e - self.warmup_epochs as f64) / span)
        } else {
            self.floor
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.decay_end_epoch
            || self.decay_end_epoch > self.stop_epoch
            || !(self.peak > 0.0 && self.floor >= 0.0)
        {
            return Err(Error::Config(format!("inconsistent schedule {self:?}")));
        }
        Ok(())
    }
}

/// The default schedule: peak 2e-4 at epoch 10, 4e-5 from epoch 100, stop
/// after epoch 200.
pub fn lr_at(epoch: usize) -> Result<f64> {
    LrSchedule::default().lr_at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchors() {
        assert_eq!(lr_at(0).unwrap(), 0.0);
        assert_eq!(lr_at(10).unwrap(), 2e-4);
        assert_eq!(lr_at(55).unwrap(), 1.2e-4);
        assert_eq!(lr_at(100).unwrap(), 4e-5);
        assert_eq!(lr_at(200).unwrap(), 4e-5);
        assert!(matches!(lr_at(201), Err(Error::ScheduleEnded { .. })));
    }

    #[test]
    fn maximum_is_peak() {
        let max = (0..=200).map(|e| lr_at(e).unwrap()).fold(0.0, f64::max);
        assert_eq!(max, 2e-4);
    }

    proptest! {
        #[test]
        fn continuous_and_piecewise_linear(e in 1usize..199) {
            // neighbouring steps differ by at most one slope step
            let (a, b, c) = (lr_at(e - 1).unwrap(), lr_at(e).unwrap(), lr_at(e + 1).unwrap());
            prop_assert!((b - a).abs() <= 2e-5 + 1e-15);
            prop_assert!((c - b).abs() <= 2e-5 + 1e-15);
            if e != 10 && e != 100 {
                prop_assert!(((c - b) - (b - a)).abs() < 1e-15);
            }
        }
    }
}
