//! Closed-form and brute-force references: the optimal Gaussian-mixture
//! denoiser, a central-difference gradient checker, and an independent
//! check of the SDS noise-space / x0-space identity.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backends::{predict, Denoiser, DenoiserQuery};
use crate::conditioning::ConditionSet;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::tensor::{from_vec, randn, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub modes: Vec<Vec<f64>>,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(modes: Vec<Vec<f64>>, sigma: f64, weights: Vec<f64>) -> Result<Self> {
        let spec = Self { modes, sigma, weights };
        spec.validate()?;
        Ok(spec)
    }

    /// Four equally weighted modes at (±1, ±1) with σ = 0.05.
    pub fn four_mode() -> Self {
        Self {
            modes: vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0]],
            sigma: 0.05,
            weights: vec![0.25; 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.modes.len() != self.weights.len() {
            return Err(Error::InvalidArgument("mixture needs one weight per mode".into()));
        }
        let dim = self.modes[0].len();
        if dim == 0 || self.modes.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidArgument("mixture modes must share a positive dimension".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidArgument("mixture sigma must be finite and non-negative".into()));
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.modes[0].len()
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Same modes and σ with different weights.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.modes.clone(), self.sigma, weights)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let x = self.modes[k]
            .iter()
            .map(|m| m + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, k)
    }

    /// Index and distance of the nearest mode.
    pub fn nearest_mode(&self, x: &[f64]) -> (usize, f64) {
        self.modes
            .iter()
            .enumerate()
            .map(|(k, m)| (k, distance(x, m)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty mixture")
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Posterior responsibilities of each mode given a noisy point at ᾱ.
pub fn responsibilities(x: &[f64], alpha_bar: f64, mixture: &MixtureSpec) -> Vec<f64> {
    let var = alpha_bar * mixture.sigma * mixture.sigma + (1.0 - alpha_bar);
    let sa = alpha_bar.sqrt();
    let logs: Vec<f64> = mixture
        .modes
        .iter()
        .zip(&mixture.weights)
        .map(|(m, w)| {
            let d2: f64 = x.iter().zip(m).map(|(xi, mi)| (xi - sa * mi).powi(2)).sum();
            w.ln() - 0.5 * d2 / var
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Exact E[ε | x_t] for data drawn from `mixture`, at the given ᾱ.
pub fn optimal_eps_at(x: &[f64], alpha_bar: f64, mixture: &MixtureSpec) -> Vec<f64> {
    let var = alpha_bar * mixture.sigma * mixture.sigma + (1.0 - alpha_bar);
    if var == 0.0 {
        return vec![0.0; x.len()];
    }
    let sa = alpha_bar.sqrt();
    let scale = (1.0 - alpha_bar).sqrt() / var;
    let r = responsibilities(x, alpha_bar, mixture);
    let mut out = vec![0.0; x.len()];
    for (m, rk) in mixture.modes.iter().zip(&r) {
        for (o, (xi, mi)) in out.iter_mut().zip(x.iter().zip(m)) {
            *o += rk * scale * (xi - sa * mi);
        }
    }
    out
}

/// ε-prediction of the Bayes-optimal denoiser for `mixture` at timestep t.
pub fn optimal_denoiser(x: &Tensor, t: usize, mixture: &MixtureSpec, schedule: &DiffusionSchedule) -> Result<Tensor> {
    mixture.validate()?;
    if x.len() != mixture.dim() {
        return Err(Error::shape("optimal denoiser input", &[mixture.dim()], x.shape()));
    }
    let ab = schedule.alpha_bar(t)?;
    let flat: Vec<f64> = x.iter().copied().collect();
    from_vec(x.shape(), optimal_eps_at(&flat, ab, mixture))
}

/// Monte-Carlo estimate of E[ε | x_t] by self-normalized importance weighting
/// over `samples` draws of x0 from the mixture.
pub fn monte_carlo_eps<R: Rng + ?Sized>(
    x: &[f64],
    alpha_bar: f64,
    mixture: &MixtureSpec,
    samples: usize,
    rng: &mut R,
) -> Vec<f64> {
    let sa = alpha_bar.sqrt();
    let sn = (1.0 - alpha_bar).sqrt();
    let mut logw = Vec::with_capacity(samples);
    let mut eps = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (x0, _) = mixture.sample(rng);
        let e: Vec<f64> = x.iter().zip(&x0).map(|(xi, x0i)| (xi - sa * x0i) / sn).collect();
        logw.push(-0.5 * e.iter().map(|v| v * v).sum::<f64>());
        eps.push(e);
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut out = vec![0.0; x.len()];
    for (lw, e) in logw.iter().zip(&eps) {
        let w = (lw - max).exp();
        total += w;
        for (o, v) in out.iter_mut().zip(e) {
            *o += w * v;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    out
}

/// Central-difference gradient of a scalar function.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.raw_dim());
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.as_slice_memory_order().map(|s| s[i]).unwrap_or_else(|| x.iter().nth(i).copied().unwrap());
        set_flat(&mut probe, i, orig + h);
        let up = f(&probe)?;
        set_flat(&mut probe, i, orig - h);
        let down = f(&probe)?;
        set_flat(&mut probe, i, orig);
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::non_finite(format!("finite difference at element {i}")));
        }
        *g = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

fn set_flat(x: &mut Tensor, i: usize, v: f64) {
    if let Some(s) = x.as_slice_memory_order_mut() {
        s[i] = v;
    } else if let Some(e) = x.iter_mut().nth(i) {
        *e = v;
    }
}

/// Relative error between an analytic and a numerical gradient.
pub fn gradient_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|b| b * b).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionReport {
    pub trials: usize,
    pub max_rel_deviation: f64,
}

/// Compares `(1+λ)ε_c − λε_u − ε` against `√SNR(t) (δ_dif + λ δ_cfg)` on
/// fresh `(x0, t, ε)` draws. Both sides are computed here from raw backend
/// outputs, independent of the loss module.
pub fn check_sds_decomposition<R: Rng + ?Sized>(
    x0: Option<&Tensor>,
    backend: &dyn Denoiser,
    conditions: &ConditionSet,
    cfg_scale: f64,
    trials: usize,
    rng: &mut R,
) -> Result<DecompositionReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let schedule = backend.schedule();
    let shape = backend.capabilities().latent_shape;
    let null = ConditionSet::null();
    let horizon = schedule.horizon();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x0 = match x0 {
            Some(x) => x.clone(),
            None => randn(&shape, rng),
        };
        let t = rng.random_range(20..=horizon - 20);
        let eps = randn(&shape, rng);
        let ab = schedule.alpha_bar(t)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let xt = &x0 * sa + &eps * sn;
        let ec = predict(backend, &DenoiserQuery::new(&xt, t, conditions))?;
        let eu = predict(backend, &DenoiserQuery::new(&xt, t, &null))?;

        let noise_path = &ec * (1.0 + cfg_scale) - &eu * cfg_scale - &eps;

        let x0c = (&xt - &ec * sn) / sa;
        let x0u = (&xt - &eu * sn) / sa;
        let delta_dif = &x0 - &x0c;
        let delta_cfg = &x0u - &x0c;
        let x0_path = (delta_dif + delta_cfg * cfg_scale) * (ab / (1.0 - ab)).sqrt();

        let diff: f64 = noise_path.iter().zip(&x0_path).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = noise_path.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
        worst = worst.max(diff / scale);
    }
    Ok(DecompositionReport {
        trials,
        max_rel_deviation: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn point_mass_limit() {
        let mix = MixtureSpec::new(vec![vec![0.3, -0.7]], 0.0, vec![1.0]).unwrap();
        let s = DiffusionSchedule::default();
        let x = from_vec(&[2], vec![0.1, 0.2]).unwrap();
        let ab = s.alpha_bar(400).unwrap();
        let e = optimal_denoiser(&x, 400, &mix, &s).unwrap();
        let expect = [(0.1 - ab.sqrt() * 0.3) / (1.0 - ab).sqrt(), (0.2 + ab.sqrt() * 0.7) / (1.0 - ab).sqrt()];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_pair_on_axis() {
        let mix = MixtureSpec::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], 0.1, vec![0.5, 0.5]).unwrap();
        let e = optimal_eps_at(&[0.0, 0.4], 0.5, &mix);
        assert!(e[0].abs() < 1e-12);
        assert!(e[1] > 0.0);
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        let mix = MixtureSpec::four_mode();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = [0.4, -0.2];
        let ab = 0.5;
        let exact = optimal_eps_at(&x, ab, &mix);
        let mc = monte_carlo_eps(&x, ab, &mix, 1_000_000, &mut rng);
        let err = distance(&exact, &mc) / exact.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 1e-2, "rel err {err}");
    }

    #[test]
    fn finite_difference_of_square_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&[5], &mut rng);
        let g = finite_difference_grad(|v| Ok(v.iter().map(|a| a * a).sum()), &x, 1e-5).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
        let c = finite_difference_grad(|_| Ok(3.0), &x, 1e-5).unwrap();
        assert!(c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(MixtureSpec::new(vec![vec![0.0]], 0.1, vec![0.5]).is_err());
        assert!(MixtureSpec::new(vec![vec![0.0], vec![1.0, 2.0]], 0.1, vec![0.5, 0.5]).is_err());
    }
}
