//! Discrete noise schedules, forward noising, Tweedie estimates and the
//! deterministic DDIM step.
//!
//! Timesteps are 1-indexed as in the usual DDPM notation. `alpha_bar(0)` is
//! defined to be exactly 1 so that `t = 0` is a valid reverse/inversion rung.

use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, ensure_same_shape, Tensor};

/// Beta-schedule family and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ScheduleFamily {
    /// β linear in t.
    Linear { beta_start: f64, beta_end: f64 },
    /// √β linear in t (the latent-diffusion convention).
    ScaledLinear { beta_start: f64, beta_end: f64 },
    /// Squared-cosine ᾱ with offset `s`, β clipped at `max_beta`.
    Cosine { s: f64, max_beta: f64 },
}

impl ScheduleFamily {
    pub const NAMES: [&'static str; 3] = ["linear", "scaled-linear", "cosine"];

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleFamily::Linear { .. } => "linear",
            ScheduleFamily::ScaledLinear { .. } => "scaled-linear",
            ScheduleFamily::Cosine { .. } => "cosine",
        }
    }

    /// Family with its customary default parameters.
    pub fn with_defaults(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(ScheduleFamily::Linear {
                beta_start: 1e-4,
                beta_end: 2e-2,
            }),
            "scaled-linear" => Ok(ScheduleFamily::ScaledLinear {
                beta_start: 0.00085,
                beta_end: 0.012,
            }),
            "cosine" => Ok(ScheduleFamily::Cosine {
                s: 0.008,
                max_beta: 0.999,
            }),
            other => Err(Error::UnknownName {
                kind: "schedule family",
                name: other.to_string(),
                known: Self::NAMES.join(", "),
            }),
        }
    }
}

impl Default for ScheduleFamily {
    fn default() -> Self {
        ScheduleFamily::Linear {
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::with_defaults(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    /// `betas[t - 1]` is β_t.
    betas: Vec<f64>,
    /// `alpha_bar[t]` is ᾱ_t, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

fn linspace(start: f64, end: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = if n > 1 { (end - start) / (n - 1) as f64 } else { 0.0 };
    (0..n).map(move |i| start + step * i as f64)
}

/// Build a schedule of `horizon` steps from a named family.
pub fn make_schedule(horizon: usize, family: ScheduleFamily) -> Result<DiffusionSchedule> {
    if horizon < 2 {
        return Err(Error::InvalidSchedule(format!(
            "horizon must be at least 2, got {horizon}"
        )));
    }
    let betas: Vec<f64> = match family {
        ScheduleFamily::Linear {
            beta_start,
            beta_end,
        } => linspace(beta_start, beta_end, horizon).collect(),
        ScheduleFamily::ScaledLinear {
            beta_start,
            beta_end,
        } => {
            if beta_start < 0.0 || beta_end < 0.0 {
                return Err(Error::InvalidSchedule(
                    "scaled-linear endpoints must be non-negative".into(),
                ));
            }
            linspace(beta_start.sqrt(), beta_end.sqrt(), horizon)
                .map(|b| b * b)
                .collect()
        }
        ScheduleFamily::Cosine { s, max_beta } => {
            let f = |t: f64| ((t / horizon as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=horizon)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(max_beta))
                .collect()
        }
    };
    DiffusionSchedule::from_betas(betas)
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_schedule(1000, ScheduleFamily::default()).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    /// Build from explicit β_1..β_T; ᾱ is the running product of (1 − β).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::InvalidSchedule(format!(
                "horizon must be at least 2, got {}",
                betas.len()
            )));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(b.is_finite() && **b > 0.0 && **b < 1.0))
        {
            return Err(Error::InvalidSchedule(format!(
                "beta_{} = {b} is outside (0, 1)",
                i + 1
            )));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        if acc <= 0.0 {
            return Err(Error::InvalidSchedule("alpha_bar underflows to zero".into()));
        }
        Ok(Self { betas, alpha_bar })
    }

    /// Number of discrete timesteps T.
    pub fn horizon(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t, 1)?;
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for t in [0, T].
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t, 0)?;
        Ok(self.alpha_bar[t])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// ᾱ_1..ᾱ_T (without the ᾱ_0 = 1 sentinel).
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar[1..]
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check_t(t, 1)?;
        let ab = self.alpha_bar[t];
        Ok(ab / (1.0 - ab))
    }

    pub fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.horizon() {
            return Err(Error::TimestepOutOfRange {
                t,
                min,
                max: self.horizon(),
            });
        }
        Ok(())
    }

    /// Map a unit-interval time to an integer step: round-half-up, clamped to [1, T].
    pub fn discretize(&self, u: f64) -> usize {
        let t = (u * self.horizon() as f64 + 0.5).floor();
        (t.max(1.0) as usize).min(self.horizon())
    }

    /// One row per t: `t,beta,alpha_bar`.
    pub fn write_table<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,beta,alpha_bar")?;
        for t in 1..=self.horizon() {
            writeln!(out, "{},{:e},{:e}", t, self.betas[t - 1], self.alpha_bar[t])?;
        }
        Ok(())
    }

    /// Read a table produced by [`write_table`](Self::write_table). ᾱ is
    /// recomputed from β and cross-checked against the stored column.
    pub fn read_table<R: BufRead>(input: R) -> Result<Self> {
        let mut betas = Vec::new();
        let mut stored = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with('t')) {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::InvalidSchedule(format!(
                    "line {}: expected 3 columns",
                    lineno + 1
                )));
            }
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::InvalidSchedule(format!("line {}: {e}", lineno + 1))
                })
            };
            let t = parse(cols[0])? as usize;
            if t != betas.len() + 1 {
                return Err(Error::InvalidSchedule(format!(
                    "line {}: timesteps must be consecutive from 1",
                    lineno + 1
                )));
            }
            betas.push(parse(cols[1])?);
            stored.push(parse(cols[2])?);
        }
        let schedule = Self::from_betas(betas)?;
        for (t, (a, b)) in schedule.alpha_bars().iter().zip(&stored).enumerate() {
            if (a - b).abs() > 1e-12 * a.abs().max(1e-300) * 1e3 {
                return Err(Error::InvalidSchedule(format!(
                    "stored alpha_bar at t = {} disagrees with cumulative product",
                    t + 1
                )));
            }
        }
        Ok(schedule)
    }
}

/// A tensor paired with its diffusion timestep; `t = 0` is clean data.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLatent {
    pub data: Tensor,
    pub t: usize,
}

impl NoisyLatent {
    pub fn new(data: Tensor, t: usize) -> Result<Self> {
        ensure_finite("noisy latent", &data)?;
        Ok(Self { data, t })
    }

    pub fn clean(data: Tensor) -> Result<Self> {
        Self::new(data, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DdimStepConfig {
    /// Stochasticity η; 0 is the deterministic sampler.
    pub eta: f64,
}

/// `√ᾱ · x0 + √(1 − ᾱ) · eps` for an explicit ᾱ.
pub fn mix_with_alpha_bar(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Tensor {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let mut out = x0 * a;
    out.zip_mut_with(eps, |o, e| *o += b * e);
    out
}

/// `(x − √(1 − ᾱ) · eps) / √ᾱ` for an explicit ᾱ.
pub fn x0_from_eps(x: &Tensor, eps: &Tensor, alpha_bar: f64) -> Tensor {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let mut out = x.clone();
    out.zip_mut_with(eps, |o, e| *o = (*o - b * e) / a);
    out
}

/// Deterministic move of `x` from `from_t` to `to_t` along the DDIM ODE,
/// holding the noise prediction fixed. Used by both reverse and inversion.
pub(crate) fn ddim_transfer(
    x: &Tensor,
    eps: &Tensor,
    from_t: usize,
    to_t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    let x0 = x0_from_eps(x, eps, schedule.alpha_bar(from_t)?);
    Ok(mix_with_alpha_bar(&x0, eps, schedule.alpha_bar(to_t)?))
}

/// Sample `x_t` from `q(x_t | x_0)` with the supplied noise.
pub fn forward_noise(
    x0: &NoisyLatent,
    t: usize,
    eps: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<NoisyLatent> {
    if x0.t != 0 {
        return Err(Error::InvalidArgument(format!(
            "forward_noise expects clean data (t = 0), got t = {}",
            x0.t
        )));
    }
    schedule.check_t(t, 1)?;
    ensure_same_shape("forward_noise eps", &x0.data, eps)?;
    ensure_finite("forward_noise eps", eps)?;
    Ok(NoisyLatent {
        data: mix_with_alpha_bar(&x0.data, eps, schedule.alpha_bar(t)?),
        t,
    })
}

/// Posterior-mean estimate x̃0 of the clean sample given a noise prediction.
pub fn tweedie_x0(xt: &NoisyLatent, eps_pred: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check_t(xt.t, 1)?;
    ensure_same_shape("tweedie eps_pred", &xt.data, eps_pred)?;
    ensure_finite("tweedie input", &xt.data)?;
    ensure_finite("tweedie eps_pred", eps_pred)?;
    Ok(x0_from_eps(&xt.data, eps_pred, schedule.alpha_bar(xt.t)?))
}

/// DDIM update from `xt.t` to `t_prev`.
///
/// With `eta = 0` this is fully deterministic and `noise` is ignored. For
/// `eta > 0` the stochastic form `√(1 − ᾱ_prev − η²β_t²)·ε̂ + ηβ_t·noise` is
/// used and `noise` must be supplied.
pub fn ddim_reverse_step(
    xt: &NoisyLatent,
    eps_pred: &Tensor,
    t_prev: usize,
    cfg: DdimStepConfig,
    schedule: &DiffusionSchedule,
    noise: Option<&Tensor>,
) -> Result<NoisyLatent> {
    if t_prev >= xt.t {
        return Err(Error::InvalidArgument(format!(
            "t_prev = {t_prev} must be below the current timestep {}",
            xt.t
        )));
    }
    schedule.check_t(xt.t, 1)?;
    let x0 = tweedie_x0(xt, eps_pred, schedule)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let data = if cfg.eta == 0.0 {
        mix_with_alpha_bar(&x0, eps_pred, ab_prev)
    } else {
        if cfg.eta < 0.0 || !cfg.eta.is_finite() {
            return Err(Error::InvalidArgument(format!("eta must be non-negative, got {}", cfg.eta)));
        }
        let noise = noise.ok_or_else(|| {
            Error::InvalidArgument("eta > 0 requires a noise tensor".into())
        })?;
        ensure_same_shape("ddim noise", &xt.data, noise)?;
        let sigma = cfg.eta * schedule.beta(xt.t)?;
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut out = &x0 * ab_prev.sqrt();
        out.zip_mut_with(eps_pred, |o, e| *o += dir * e);
        out.zip_mut_with(noise, |o, n| *o += sigma * n);
        out
    };
    ensure_finite("ddim reverse step", &data)?;
    Ok(NoisyLatent { data, t: t_prev })
}

/// Signal-to-noise ratio ᾱ_t / (1 − ᾱ_t).
pub fn snr(t: usize, schedule: &DiffusionSchedule) -> Result<f64> {
    schedule.snr(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{from_vec, max_abs_diff, randn, rel_l2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_step_linear_product() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.1]).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.81).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn default_linear_schedule_decays() {
        let s = make_schedule(1000, ScheduleFamily::default()).unwrap();
        // independent cumulative product
        let mut acc = 1.0;
        for t in 1..=1000 {
            let beta = 1e-4 + (2e-2 - 1e-4) * (t - 1) as f64 / 999.0;
            acc *= 1.0 - beta;
            assert!((s.alpha_bar(t).unwrap() - acc).abs() <= 1e-12 * acc);
        }
        assert!(s.alpha_bar(1000).unwrap() < 0.01);
        for t in 1..1000 {
            assert!(s.alpha_bar(t + 1).unwrap() < s.alpha_bar(t).unwrap());
            assert!(s.snr(t).unwrap() > s.snr(t + 1).unwrap());
        }
    }

    #[test]
    fn every_family_satisfies_invariants() {
        for name in ScheduleFamily::NAMES {
            let s = make_schedule(1000, name.parse().unwrap()).unwrap();
            for t in 1..=1000 {
                let ab = s.alpha_bar(t).unwrap();
                assert!(ab > 0.0 && ab < 1.0, "{name} t={t}");
                let prev = s.alpha_bar(t - 1).unwrap();
                let rel = (ab - prev * (1.0 - s.beta(t).unwrap())).abs() / ab;
                assert!(rel < 1e-12);
                assert!(ab < prev);
            }
        }
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(make_schedule(1, ScheduleFamily::default()).is_err());
        assert!(make_schedule(
            10,
            ScheduleFamily::Linear {
                beta_start: 0.5,
                beta_end: 1.5
            }
        )
        .is_err());
        assert!(make_schedule(
            10,
            ScheduleFamily::Linear {
                beta_start: 0.0,
                beta_end: 0.1
            }
        )
        .is_err());
        assert!("quadratic".parse::<ScheduleFamily>().is_err());
    }

    #[test]
    fn snr_examples() {
        let s = DiffusionSchedule::from_betas(vec![0.5, 0.2]).unwrap();
        // ᾱ_1 = 0.5 → SNR 1; ᾱ_2 = 0.4 → SNR 2/3
        assert!((s.snr(1).unwrap() - 1.0).abs() < 1e-15);
        let s = DiffusionSchedule::from_betas(vec![0.2, 0.5]).unwrap();
        assert!((s.snr(1).unwrap() - 4.0).abs() < 1e-12);
        assert!(s.snr(0).is_err());
        assert!(s.snr(3).is_err());
    }

    #[test]
    fn mixing_limits() {
        let x0 = from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let eps = from_vec(&[3], vec![0.3, 0.7, -1.1]).unwrap();
        assert_eq!(mix_with_alpha_bar(&x0, &eps, 1.0), x0);
        assert_eq!(mix_with_alpha_bar(&x0, &eps, 0.0), eps);
        let zero = crate::tensor::zeros(&[4]);
        let unit = from_vec(&[4], vec![1.0; 4]).unwrap();
        let xt = mix_with_alpha_bar(&zero, &unit, 0.75);
        assert!(xt.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn forward_noise_validates() {
        let s = DiffusionSchedule::default();
        let x0 = NoisyLatent::clean(crate::tensor::zeros(&[2])).unwrap();
        assert!(forward_noise(&x0, 0, &crate::tensor::zeros(&[2]), &s).is_err());
        assert!(forward_noise(&x0, 1001, &crate::tensor::zeros(&[2]), &s).is_err());
        assert!(matches!(
            forward_noise(&x0, 5, &crate::tensor::zeros(&[3]), &s),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tweedie_inverts_forward_noise() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in [1, 10, 250, 500, 999, 1000] {
            let x0 = NoisyLatent::clean(randn(&[5], &mut rng)).unwrap();
            let eps = randn(&[5], &mut rng);
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let rec = tweedie_x0(&xt, &eps, &s).unwrap();
            assert!(rel_l2(&rec, &x0.data) < 1e-6, "t={t}");
        }
    }

    #[test]
    fn tweedie_zero_noise_rescales() {
        let s = DiffusionSchedule::default();
        let v = from_vec(&[2], vec![0.4, -1.0]).unwrap();
        let xt = NoisyLatent::new(v.clone(), 300).unwrap();
        let out = tweedie_x0(&xt, &crate::tensor::zeros(&[2]), &s).unwrap();
        let expected = &v / s.alpha_bar(300).unwrap().sqrt();
        assert!(max_abs_diff(&out, &expected) < 1e-15);
    }

    #[test]
    fn reverse_to_zero_is_tweedie() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = NoisyLatent::new(randn(&[4], &mut rng), 400).unwrap();
        let eps = randn(&[4], &mut rng);
        let stepped = ddim_reverse_step(&xt, &eps, 0, DdimStepConfig::default(), &s, None).unwrap();
        let x0 = tweedie_x0(&xt, &eps, &s).unwrap();
        assert_eq!(stepped.data, x0);
        assert_eq!(stepped.t, 0);
    }

    #[test]
    fn reverse_with_exact_noise_retraces_forward() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = NoisyLatent::clean(randn(&[6], &mut rng)).unwrap();
        let eps = randn(&[6], &mut rng);
        let mut x = forward_noise(&x0, 900, &eps, &s).unwrap();
        for t_prev in (0..900).rev().step_by(37) {
            x = ddim_reverse_step(&x, &eps, t_prev, DdimStepConfig::default(), &s, None).unwrap();
            if t_prev > 0 {
                let expected = forward_noise(&x0, t_prev, &eps, &s).unwrap();
                assert!(rel_l2(&x.data, &expected.data) < 1e-5);
            }
        }
    }

    #[test]
    fn reverse_rejects_non_decreasing_target() {
        let s = DiffusionSchedule::default();
        let xt = NoisyLatent::new(crate::tensor::zeros(&[2]), 10).unwrap();
        let eps = crate::tensor::zeros(&[2]);
        assert!(ddim_reverse_step(&xt, &eps, 10, DdimStepConfig::default(), &s, None).is_err());
        let stochastic = DdimStepConfig { eta: 0.5 };
        assert!(ddim_reverse_step(&xt, &eps, 5, stochastic, &s, None).is_err());
        assert!(ddim_reverse_step(&xt, &eps, 5, stochastic, &s, Some(&eps)).is_ok());
    }

    #[test]
    fn discretize_rounds_half_up_and_clamps() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.discretize(0.5), 500);
        assert_eq!(s.discretize(0.0005), 1);
        assert_eq!(s.discretize(0.0), 1);
        assert_eq!(s.discretize(0.2226), 223);
        assert_eq!(s.discretize(1.2), 1000);
    }

    #[test]
    fn table_round_trip() {
        let s = make_schedule(50, "cosine".parse().unwrap()).unwrap();
        let mut buf = Vec::new();
        s.write_table(&mut buf).unwrap();
        let back = DiffusionSchedule::read_table(std::io::Cursor::new(buf)).unwrap();
        for t in 0..=50 {
            let (a, b) = (s.alpha_bar(t).unwrap(), back.alpha_bar(t).unwrap());
            assert!((a - b).abs() <= 1e-12 * a);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_any_t(t in 1usize..=1000, seed in any::<u64>()) {
                let s = DiffusionSchedule::default();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x0 = NoisyLatent::clean(randn(&[3], &mut rng)).unwrap();
                let eps = randn(&[3], &mut rng);
                let xt = forward_noise(&x0, t, &eps, &s).unwrap();
                prop_assert!(rel_l2(&tweedie_x0(&xt, &eps, &s).unwrap(), &x0.data) < 1e-6);
            }
        }
    }
}
