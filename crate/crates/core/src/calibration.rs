//! Oracle measurements behind the acceptance thresholds, and the frozen
//! acceptance config they are written to.

use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backends::toy::ToyTrainConfig;
use crate::backends::{predict, Denoiser, DenoiserQuery, MixtureDenoiser, ToyDenoiser};
use crate::conditioning::{ConditionSet, TextCondition};
use crate::datasets::{MixtureDataset, SampleSource};
use crate::diffusion::{forward_noise, DiffusionSchedule, NoisyLatent};
use crate::error::{Error, Result};
use crate::inversion::{invert, plan_inversion, reverse_along};
use crate::oracles::optimal_eps_at;
use crate::tensor::{from_vec, randn, rel_l2};

/// The committed acceptance config.
pub const FROZEN_CONFIG: &str = include_str!("../acceptance.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Held-out ε-MSE the trained toy must stay below.
    pub eps_mse: f64,
    /// Mean ε-direction cosine vs the optimal denoiser at t = T/2.
    pub cosine: f64,
    /// Median relative L2 of an inversion round trip.
    pub round_trip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySetup {
    pub seed: u64,
    pub steps: usize,
}

impl ToySetup {
    pub fn train_config(&self, eps_mse: Option<f64>) -> ToyTrainConfig {
        ToyTrainConfig {
            steps: self.steps,
            mse_threshold: eps_mse,
            ..ToyTrainConfig::default()
        }
    }

    /// Toy denoiser on the standard four-mode dataset.
    pub fn train(&self, eps_mse: Option<f64>) -> Result<ToyDenoiser> {
        ToyDenoiser::init(&[2], 4, DiffusionSchedule::default(), self.seed)?.train(
            &MixtureDataset::standard(),
            &self.train_config(eps_mse),
            self.seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptanceConfig {
    pub thresholds: Thresholds,
    pub toy: ToySetup,
}

impl AcceptanceConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("acceptance config: {e}")))
    }

    pub fn frozen() -> Result<Self> {
        Self::parse(FROZEN_CONFIG)
    }
}

impl Default for AcceptanceConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds {
                eps_mse: 0.15,
                cosine: 0.9,
                round_trip: 1e-3,
            },
            toy: ToySetup { seed: 1, steps: 8000 },
        }
    }
}

fn text(label: usize) -> ConditionSet {
    ConditionSet::text(TextCondition::Token(label))
}

/// Mean cosine between the backend's text-conditioned ε and the exact
/// posterior ε of the labelled class mixture, over noised dataset draws at t.
pub fn eps_direction_cosine(
    backend: &dyn Denoiser,
    data: &MixtureDataset,
    t: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidArgument("at least one sample is required".into()));
    }
    let schedule = backend.schedule();
    let ab = schedule.alpha_bar(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let s = data.draw(&mut rng);
        let eps = randn(&[data.dim()], &mut rng);
        let x0 = from_vec(&[data.dim()], s.x)?;
        let xt = forward_noise(&NoisyLatent::clean(x0)?, t, &eps, schedule)?;
        let pred = predict(backend, &DenoiserQuery::new(&xt.data, t, &text(s.label)))?;
        let flat: Vec<f64> = xt.data.iter().copied().collect();
        let exact = optimal_eps_at(&flat, ab, &data.class_mixture(s.label)?);
        let dot: f64 = pred.iter().zip(&exact).map(|(a, b)| a * b).sum();
        let na = pred.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = exact.iter().map(|b| b * b).sum::<f64>().sqrt();
        total += dot / (na * nb).max(1e-300);
    }
    Ok(total / samples as f64)
}

/// Irreducible text-conditioned ε-MSE: what the exact posterior mean scores
/// under the toy trainer's held-out protocol (t uniform on 1..=T).
pub fn oracle_eps_mse(data: &MixtureDataset, schedule: &DiffusionSchedule, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = data.dim();
    let mut total = 0.0;
    for _ in 0..samples {
        let s = data.draw(&mut rng);
        let t = rng.random_range(1..=schedule.horizon());
        let ab = schedule.alpha_bar(t)?;
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let xt: Vec<f64> = s.x.iter().zip(&eps).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect();
        let exact = optimal_eps_at(&xt, ab, &data.class_mixture(s.label)?);
        total += exact.iter().zip(&eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / (samples * d) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTripStats {
    pub trials: usize,
    pub target_t: usize,
    pub delta_t: usize,
    /// Median relative L2 error of invert-then-reverse.
    pub median: f64,
    /// Median error of the control: stochastic noising to the same t, then reverse.
    pub control_median: f64,
    /// Paired trials where inversion beat the control.
    pub wins: usize,
}

impl RoundTripStats {
    pub fn win_rate(&self) -> f64 {
        self.wins as f64 / self.trials as f64
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Text-conditioned DDIM inversion to `target_t` followed by the
/// deterministic reverse over the same ladder, against a forward-noised control.
pub fn round_trip(
    backend: &dyn Denoiser,
    data: &dyn SampleSource,
    target_t: usize,
    delta_t: usize,
    trials: usize,
    seed: u64,
) -> Result<RoundTripStats> {
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let schedule = backend.schedule();
    let plan = plan_inversion(target_t, delta_t, schedule.horizon())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut errs, mut ctrl, mut wins) = (Vec::new(), Vec::new(), 0);
    for _ in 0..trials {
        let s = data.draw(&mut rng as &mut dyn RngCore);
        let x0 = from_vec(&[data.dim()], s.x)?;
        let c = text(s.label);
        let pred = |x: &crate::Tensor, t: usize| predict(backend, &DenoiserQuery::new(x, t, &c));
        let xt = invert(&NoisyLatent::clean(x0.clone())?, &plan, pred, schedule)?;
        let err = rel_l2(&reverse_along(&xt, &plan, pred, schedule)?.data, &x0);
        let eps = randn(&[data.dim()], &mut rng);
        let noised = forward_noise(&NoisyLatent::clean(x0.clone())?, target_t, &eps, schedule)?;
        let control = rel_l2(&reverse_along(&noised, &plan, pred, schedule)?.data, &x0);
        if err < control {
            wins += 1;
        }
        errs.push(err);
        ctrl.push(control);
    }
    Ok(RoundTripStats {
        trials,
        target_t,
        delta_t,
        median: median(errs),
        control_median: median(ctrl),
        wins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub config: AcceptanceConfig,
    pub oracle_eps_mse: f64,
    pub toy_eps_mse: f64,
    pub toy_cosine: f64,
    pub oracle_round_trip: Vec<RoundTripStats>,
    pub toy_round_trip: RoundTripStats,
}

/// Measure the oracle floors and the reference toy against `config`.
pub fn calibrate(config: &AcceptanceConfig, toy: &ToyDenoiser, samples: usize) -> Result<CalibrationReport> {
    let data = MixtureDataset::standard();
    let schedule = toy.schedule().clone();
    let half = schedule.horizon() / 2;
    let oracle = MixtureDenoiser::new(data.clone(), schedule.clone());
    let oracle_round_trip = [50, 10, 1]
        .into_iter()
        .map(|dt| round_trip(&oracle, &data, half, dt, 100, config.toy.seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationReport {
        config: config.clone(),
        oracle_eps_mse: oracle_eps_mse(&data, &schedule, samples, config.toy.seed)?,
        toy_eps_mse: toy.heldout_mse(&data, samples, config.toy.seed)?,
        toy_cosine: eps_direction_cosine(toy, &data, half, samples, config.toy.seed)?,
        oracle_round_trip,
        toy_round_trip: round_trip(toy, &data, half, 50, 100, config.toy.seed)?,
    })
}

/// TOML with the measurements that back each threshold as comments.
pub fn render_config(report: &CalibrationReport) -> Result<String> {
    let mut out = String::new();
    let r = report;
    let th = &r.config.thresholds;
    let _ = writeln!(out, "# Acceptance thresholds. Regenerate with `scoredistill oracle calibrate`.");
    let _ = writeln!(out, "#");
    let _ = writeln!(
        out,
        "# eps_mse: reference toy (seed {}, {} steps) held-out eps-MSE = {:.4}; exact posterior floor = {:.4}.",
        r.config.toy.seed, r.config.toy.steps, r.toy_eps_mse, r.oracle_eps_mse
    );
    let _ = writeln!(
        out,
        "# cosine: reference toy mean eps-direction cosine vs the optimal denoiser at t = T/2 = {:.4}.",
        r.toy_cosine
    );
    for s in &r.oracle_round_trip {
        let _ = writeln!(
            out,
            "# round_trip: optimal denoiser, t = {}, dt = {}: median rel. L2 = {:.3e}, control median = {:.3e}, wins {}/{}.",
            s.target_t, s.delta_t, s.median, s.control_median, s.wins, s.trials
        );
    }
    let s = &r.toy_round_trip;
    let _ = writeln!(
        out,
        "# round_trip: reference toy, t = {}, dt = {}: median rel. L2 = {:.3e}, control median = {:.3e}, wins {}/{}.",
        s.target_t, s.delta_t, s.median, s.control_median, s.wins, s.trials
    );
    let floor = r.oracle_round_trip.iter().map(|s| s.median).fold(f64::INFINITY, f64::min);
    if floor >= th.round_trip {
        let _ = writeln!(
            out,
            "# note: even the exact denoiser does not reach round_trip = {:.0e}; the threshold is kept as specified.",
            th.round_trip
        );
    }
    out.push('\n');
    out.push_str(&toml::to_string(&r.config).map_err(|e| Error::Config(e.to_string()))?);
    Ok(out)
}
