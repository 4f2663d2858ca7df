//! Warmup and ramp of the loss weighting λ and the training radius ε.

use crate::error::{Error, Result};

/// Iterations are counted from 1. Up to `warmup` only the standard loss is
/// used (λ = 1, ε = 0); over the next `ramp` iterations λ falls linearly to
/// `lambda_final` while ε rises linearly to its target; both then hold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup: u64,
    pub ramp: u64,
    pub lambda_final: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup: 250,
            ramp: 250,
            lambda_final: 0.75,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_final) {
            return Err(Error::Config(format!(
                "final λ must lie in [0, 1], got {}",
                self.lambda_final
            )));
        }
        Ok(())
    }

    /// Fraction of the ramp completed at iteration `t`.
    pub fn progress(&self, t: u64) -> f64 {
        if t <= self.warmup {
            0.0
        } else if self.ramp == 0 || t >= self.warmup + self.ramp {
            1.0
        } else {
            (t - self.warmup) as f64 / self.ramp as f64
        }
    }

    pub fn lambda(&self, t: u64) -> f64 {
        1.0 - self.progress(t) * (1.0 - self.lambda_final)
    }

    /// Fraction of the target ε in effect at iteration `t`.
    pub fn eps_fraction(&self, t: u64) -> f64 {
        self.progress(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_shape() {
        let s = Schedule::default();
        assert_eq!(s.lambda(1), 1.0);
        assert_eq!(s.lambda(250), 1.0);
        assert_eq!(s.eps_fraction(250), 0.0);
        assert!((s.lambda(375) - 0.875).abs() < 1e-15);
        assert_eq!(s.lambda(500), 0.75);
        assert_eq!(s.lambda(10_000), 0.75);
        assert_eq!(s.eps_fraction(500), 1.0);
    }
}
