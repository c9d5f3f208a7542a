//! Annealed sliding window over diffusion timesteps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};

/// `[t_min, t_max]` on the unit scale, shrinking linearly from the upper
/// window to the lower one over the first `warmup_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimestepWindow {
    pub t_min_up: f64,
    pub t_max_up: f64,
    pub t_min_low: f64,
    pub t_max_low: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

pub const DEFAULT_WARMUP_FRACTION: f64 = 1.0 / 3.0;

/// `⌈total · fraction⌉`, at least 1.
pub fn warmup_steps(total_steps: usize, fraction: f64) -> usize {
    if fraction == DEFAULT_WARMUP_FRACTION {
        // Exact integer ceiling for the default, free of float rounding.
        return total_steps.div_ceil(3).max(1);
    }
    ((total_steps as f64 * fraction).ceil() as usize).max(1)
}

impl TimestepWindow {
    pub fn new(total_steps: usize, warmup_fraction: f64) -> Result<Self> {
        let w = Self {
            t_min_up: 0.22,
            t_max_up: 0.98,
            t_min_low: 0.02,
            t_max_low: 0.78,
            warmup_steps: warmup_steps(total_steps, warmup_fraction),
            total_steps,
        };
        w.validate()?;
        Ok(w)
    }

    /// A window fixed at `[lo, hi]` for every step.
    pub fn constant(lo: f64, hi: f64, total_steps: usize) -> Result<Self> {
        let w = Self {
            t_min_up: lo,
            t_max_up: hi,
            t_min_low: lo,
            t_max_low: hi,
            warmup_steps: 1,
            total_steps,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        let ok = [self.t_min_up, self.t_max_up, self.t_min_low, self.t_max_low]
            .into_iter()
            .all(unit)
            && self.t_min_up < self.t_max_up
            && self.t_min_low < self.t_max_low
            && self.t_min_low <= self.t_min_up
            && self.t_max_low <= self.t_max_up
            && self.warmup_steps >= 1
            && self.total_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid timestep window {self:?}")))
        }
    }

    /// Active `(t_min, t_max)` at `step`.
    pub fn window_at(&self, step: usize) -> Result<(f64, f64)> {
        if step > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} beyond total of {}",
                self.total_steps
            )));
        }
        if step >= self.warmup_steps {
            return Ok((self.t_min_low, self.t_max_low));
        }
        let f = step as f64 / self.warmup_steps as f64;
        Ok((
            self.t_min_up + f * (self.t_min_low - self.t_min_up),
            self.t_max_up + f * (self.t_max_low - self.t_max_up),
        ))
    }

    /// Draw `u ~ U(window_at(step))` and map it to a discrete step in `[1, T]`.
    pub fn sample_t<R: Rng + ?Sized>(&self, step: usize, rng: &mut R, schedule: &DiffusionSchedule) -> Result<usize> {
        let (lo, hi) = self.window_at(step)?;
        let u = rng.random_range(lo..hi);
        Ok(schedule.discretize(u))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoints_and_midpoint() {
        let w = TimestepWindow::new(3000, DEFAULT_WARMUP_FRACTION).unwrap();
        assert_eq!(w.warmup_steps, 1000);
        assert_eq!(w.window_at(0).unwrap(), (0.22, 0.98));
        assert_eq!(w.window_at(1000).unwrap(), (0.02, 0.78));
        assert_eq!(w.window_at(3000).unwrap(), (0.02, 0.78));
        let (a, b) = w.window_at(500).unwrap();
        assert!((a - 0.12).abs() < 1e-12 && (b - 0.88).abs() < 1e-12);
        assert!(w.window_at(3001).is_err());
    }

    #[test]
    fn warmup_is_ceiling() {
        assert_eq!(warmup_steps(10, DEFAULT_WARMUP_FRACTION), 4);
        assert_eq!(warmup_steps(100, 0.25), 25);
        assert_eq!(warmup_steps(101, 0.2), 21);
    }

    #[test]
    fn sampling_respects_bounds_and_seed() {
        let s = DiffusionSchedule::default();
        let w = TimestepWindow::new(300, DEFAULT_WARMUP_FRACTION).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let t = w.sample_t(0, &mut a, &s).unwrap();
            assert!((219..=981).contains(&t));
            assert_eq!(t, w.sample_t(0, &mut b, &s).unwrap());
            let late = w.sample_t(200, &mut a, &s).unwrap();
            let _ = w.sample_t(200, &mut b, &s).unwrap();
            assert!((19..=781).contains(&late));
        }
    }

    #[test]
    fn rejects_inverted_windows() {
        let mut w = TimestepWindow::new(10, 0.5).unwrap();
        w.t_min_low = 0.5;
        assert!(w.validate().is_err());
    }

    proptest! {
        #[test]
        fn bounds_non_increasing(total in 1usize..500, frac in 0.05f64..1.0) {
            let w = TimestepWindow::new(total, frac).unwrap();
            let mut prev = w.window_at(0).unwrap();
            for step in 1..=total {
                let cur = w.window_at(step).unwrap();
                prop_assert!(cur.0 <= prev.0 && cur.1 <= prev.1);
                let width = cur.1 - cur.0;
                prop_assert!((0.76 - 1e-12..=0.76 + 1e-12).contains(&width));
                prev = cur;
            }
        }
    }
}
