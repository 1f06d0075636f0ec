use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Reference learning rate scaled linearly by batch size over 256.
pub fn scaled_lr(blr: f64, batch_size: usize) -> f64 {
    blr * batch_size as f64 / 256.0
}

/// Linear warmup followed by cosine decay to zero, indexed by optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(blr: f64, batch_size: usize, warmup_epochs: usize, total_epochs: usize, steps_per_epoch: usize) -> Self {
        let total_steps = total_epochs * steps_per_epoch;
        Self {
            base_lr: scaled_lr(blr, batch_size),
            warmup_steps: (warmup_epochs * steps_per_epoch).min(total_steps),
            total_steps,
        }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::ScheduleRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.base_lr);
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_forms() {
        let s = Schedule::new(1.5e-4, 2048, 5, 100, 10);
        assert_eq!(s.base_lr, 1.2e-3);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(50).unwrap(), s.base_lr);
        assert!(s.lr_at(1000).unwrap().abs() <= 1e-12);
        assert!(matches!(s.lr_at(1001), Err(Error::ScheduleRange { step: 1001, total: 1000 })));
    }

    proptest! {
        #[test]
        fn nonincreasing_after_warmup(warm in 0usize..10, extra in 1usize..50, spe in 1usize..5, blr in 1e-5f64..1e-2) {
            let s = Schedule::new(blr, 64, warm, warm + extra, spe);
            let mut prev = f64::INFINITY;
            for step in s.warmup_steps..=s.total_steps {
                let lr = s.lr_at(step).unwrap();
                prop_assert!(lr >= 0.0 && lr <= prev);
                prev = lr;
            }
            for step in 0..s.warmup_steps {
                prop_assert!(s.lr_at(step).unwrap() < s.lr_at(step + 1).unwrap());
            }
            prop_assert!((s.lr_at(s.warmup_steps).unwrap() - s.base_lr).abs() < 1e-12);
        }
    }
}
