//! Score-distillation gradients: SDS, its two decomposed terms, CSM and
//! VPCSM. Every mode returns a gradient in noise-prediction scale with
//! respect to the rendered image; no derivative flows through the denoiser.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::backends::{predict, Denoiser, DenoiserQuery};
use crate::conditioning::ConditionSet;
use crate::diffusion::{forward_noise, DiffusionSchedule, NoisyLatent};
use crate::error::{Error, Result};
use crate::guidance::{apply_cfg, guidance_direction, GuidanceConfig, PredictionBundle};
use crate::inversion::{invert, plan_inversion};
use crate::registry::Registry;
use crate::tensor::{ensure_same_shape, norm, randn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Sds,
    CfgOnly,
    DifOnly,
    Csm,
    Vpcsm,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [LossMode::Sds, LossMode::CfgOnly, LossMode::DifOnly, LossMode::Csm, LossMode::Vpcsm];

    pub fn name(&self) -> &'static str {
        match self {
            LossMode::Sds => "sds",
            LossMode::CfgOnly => "cfg_only",
            LossMode::DifOnly => "dif_only",
            LossMode::Csm => "csm",
            LossMode::Vpcsm => "vpcsm",
        }
    }

    pub fn uses_inversion(&self) -> bool {
        matches!(self, LossMode::Csm | LossMode::Vpcsm)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownName {
                kind: "loss mode",
                name: s.to_string(),
                known: LossMode::ALL.map(|m| m.name()).join(", "),
            })
    }
}

/// ω(t).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    One,
    OneMinusAlphaBar,
}

impl Weighting {
    pub fn omega(&self, t: usize, schedule: &DiffusionSchedule) -> Result<f64> {
        match self {
            Weighting::One => Ok(1.0),
            Weighting::OneMinusAlphaBar => Ok(1.0 - schedule.alpha_bar(t)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub mode: LossMode,
    pub omega: Weighting,
    pub guidance: GuidanceConfig,
    pub delta_t: usize,
    /// VPCSM unconditional branch keeps the visual prompt: (∅, v) instead of (∅, ∅).
    pub uncond_keeps_visual: bool,
    /// Invert with the conditional prediction instead of ∅.
    pub conditional_inversion: bool,
}

impl LossConfig {
    pub fn new(mode: LossMode) -> Self {
        Self {
            mode,
            omega: Weighting::One,
            guidance: GuidanceConfig::default(),
            delta_t: 50,
            uncond_keeps_visual: false,
            conditional_inversion: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        if self.mode.uses_inversion() && self.delta_t < 1 {
            return Err(Error::InvalidArgument("inversion-based modes need delta_t >= 1".into()));
        }
        Ok(())
    }
}

/// Tweedie estimates at the noisy latent the gradient was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub xt: Tensor,
    pub x0_cond: Tensor,
    pub x0_uncond: Tensor,
    /// `x̃0_con + λ (x̃0_con − x̃0_uncon)`.
    pub x0_guided: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub grad: Tensor,
    /// Named norms: `delta_dif`, `delta_cfg`, `cfg_term`, `pag_term` as present.
    pub terms: BTreeMap<&'static str, f64>,
    pub t_used: usize,
    pub mode: LossMode,
    pub estimates: Estimates,
}

impl GradientReport {
    pub fn term(&self, name: &str) -> f64 {
        self.terms.get(name).copied().unwrap_or(0.0)
    }
}

fn eval(backend: &dyn Denoiser, x: &Tensor, t: usize, c: &ConditionSet) -> Result<Tensor> {
    predict(backend, &DenoiserQuery::new(x, t, c))
}

fn estimates(xt: &NoisyLatent, bundle: &PredictionBundle, cfg_scale: f64) -> Estimates {
    Estimates {
        xt: xt.data.clone(),
        x0_cond: bundle.x0_cond.clone(),
        x0_uncond: bundle.x0_uncond.clone().expect("unconditional estimate"),
        x0_guided: bundle.x0_guided(cfg_scale).expect("unconditional estimate"),
    }
}

fn decomposition_terms(x0: &Tensor, bundle: &PredictionBundle) -> (Tensor, Tensor) {
    let x0u = bundle.x0_uncond.as_ref().expect("unconditional estimate");
    (x0 - &bundle.x0_cond, x0u - &bundle.x0_cond)
}

fn unconditional(conditions: &ConditionSet, cfg: &LossConfig) -> ConditionSet {
    if cfg.uncond_keeps_visual {
        conditions.null_text()
    } else {
        ConditionSet::null()
    }
}

/// Stochastic noising at `t` with cond/uncond predictions.
fn noised_bundle(
    x0: &Tensor,
    t: usize,
    conditions: &ConditionSet,
    eps: &Tensor,
    backend: &dyn Denoiser,
    cfg: &LossConfig,
) -> Result<(NoisyLatent, PredictionBundle)> {
    ensure_same_shape("sds noise", x0, eps)?;
    let schedule = backend.schedule();
    let xt = forward_noise(&NoisyLatent::clean(x0.clone())?, t, eps, schedule)?;
    let ec = eval(backend, &xt.data, t, conditions)?;
    let eu = eval(backend, &xt.data, t, &unconditional(conditions, cfg))?;
    let bundle = PredictionBundle::new(&xt, ec, Some(eu), None, schedule)?;
    Ok((xt, bundle))
}

/// `ω(t) ((1+λ) ε_c − λ ε_u − ε)` at `x_t = forward_noise(x0, t, ε)`.
pub fn sds_gradient(
    x0: &Tensor,
    t: usize,
    conditions: &ConditionSet,
    eps: &Tensor,
    backend: &dyn Denoiser,
    cfg: &LossConfig,
) -> Result<GradientReport> {
    let (xt, bundle) = noised_bundle(x0, t, conditions, eps, backend, cfg)?;
    let omega = cfg.omega.omega(t, backend.schedule())?;
    let mut grad = apply_cfg(&bundle, &cfg.guidance)? - eps;
    grad *= omega;
    let (dif, dcfg) = decomposition_terms(x0, &bundle);
    Ok(GradientReport {
        grad,
        terms: BTreeMap::from([("delta_dif", norm(&dif)), ("delta_cfg", norm(&dcfg))]),
        t_used: t,
        mode: LossMode::Sds,
        estimates: estimates(&xt, &bundle, cfg.guidance.cfg_scale),
    })
}

/// One term of the SDS decomposition, mapped back to noise scale:
/// `dif_only = ω √SNR δ_dif`, `cfg_only = ω λ √SNR δ_cfg`, with
/// `δ_dif = x0 − x̃0_con` and `δ_cfg = x̃0_uncon − x̃0_con`.
pub fn decomposed_gradient(
    x0: &Tensor,
    t: usize,
    conditions: &ConditionSet,
    eps: &Tensor,
    backend: &dyn Denoiser,
    cfg: &LossConfig,
) -> Result<GradientReport> {
    if !matches!(cfg.mode, LossMode::CfgOnly | LossMode::DifOnly) {
        return Err(Error::InvalidArgument(format!(
            "decomposed gradient needs cfg_only or dif_only, got {}",
            cfg.mode
        )));
    }
    let (xt, bundle) = noised_bundle(x0, t, conditions, eps, backend, cfg)?;
    let schedule = backend.schedule();
    let scale = cfg.omega.omega(t, schedule)? * schedule.snr(t)?.sqrt();
    let (dif, dcfg) = decomposition_terms(x0, &bundle);
    let terms = BTreeMap::from([("delta_dif", norm(&dif)), ("delta_cfg", norm(&dcfg))]);
    let grad = match cfg.mode {
        LossMode::DifOnly => dif * scale,
        _ => dcfg * (scale * cfg.guidance.cfg_scale),
    };
    Ok(GradientReport {
        grad,
        terms,
        t_used: t,
        mode: cfg.mode,
        estimates: estimates(&xt, &bundle, cfg.guidance.cfg_scale),
    })
}

/// DDIM-invert `x0` to `t` along the δt ladder.
pub fn invert_to(
    x0: &Tensor,
    t: usize,
    conditions: &ConditionSet,
    backend: &dyn Denoiser,
    cfg: &LossConfig,
) -> Result<NoisyLatent> {
    let schedule = backend.schedule();
    let plan = plan_inversion(t, cfg.delta_t, schedule.horizon())?;
    let inv_cond = if cfg.conditional_inversion {
        conditions.clone()
    } else {
        ConditionSet::null()
    };
    invert(
        &NoisyLatent::clean(x0.clone())?,
        &plan,
        |x, s| eval(backend, x, s, &inv_cond),
        schedule,
    )
}

fn inverted_guidance(
    x0: &Tensor,
    t: usize,
    conditions: &ConditionSet,
    backend: &dyn Denoiser,
    cfg: &LossConfig,
    guidance: &GuidanceConfig,
    mode: LossMode,
) -> Result<GradientReport> {
    cfg.validate()?;
    let schedule = backend.schedule();
    let xt = invert_to(x0, t, conditions, backend, cfg)?;
    let ec = eval(backend, &xt.data, t, conditions)?;
    let eu = eval(backend, &xt.data, t, &unconditional(conditions, cfg))?;
    let perturbed = if guidance.pag_scale != 0.0 {
        if !backend.capabilities().supports_perturbed_attention {
            return Err(Error::Capability(format!(
                "pag_scale = {} needs a backend with perturbed attention; `{}` has none",
                guidance.pag_scale,
                backend.id()
            )));
        }
        let q = DenoiserQuery::new(&xt.data, t, conditions).perturbed(&guidance.pag_blocks);
        Some(predict(backend, &q)?)
    } else {
        None
    };
    let bundle = PredictionBundle::new(&xt, ec, Some(eu), perturbed, schedule)?;
    let mut grad = guidance_direction(&bundle, guidance)?;
    grad *= cfg.omega.omega(t, schedule)?;

    let (dif, dcfg) = decomposition_terms(x0, &bundle);
    let eu = bundle.eps_uncond.as_ref().expect("unconditional prediction");
    let mut terms = BTreeMap::from([
        ("delta_dif", norm(&dif)),
        ("delta_cfg", norm(&dcfg)),
        ("cfg_term", guidance.cfg_scale * norm(&(&bundle.eps_cond - eu))),
    ]);
    if let Some(p) = &bundle.eps_perturbed {
        terms.insert("pag_term", guidance.pag_scale * norm(&(&bundle.eps_cond - p)));
    }
    Ok(GradientReport {
        grad,
        terms,
        t_used: t,
        mode,
        estimates: estimates(&xt, &bundle, guidance.cfg_scale),
    })
}

/// `ω(t) λ (ε(x_inv, t, y) − ε(x_inv, t, ∅))` at the DDIM-inverted latent.
pub fn csm_gradient(
    x0: &Tensor,
    t: usize,
    conditions: &ConditionSet,
    backend: &dyn Denoiser,
    cfg: &LossConfig,
) -> Result<GradientReport> {
    let guidance = GuidanceConfig {
        pag_scale: 0.0,
        ..cfg.guidance.clone()
    };
    inverted_guidance(x0, t, conditions, backend, cfg, &guidance, LossMode::Csm)
}

/// `ω(t) (λ (ε(x_inv, t, y, v) − ε(x_inv, t, ∅, ∅)) + s (ε(x_inv, t, y, v) − ε̄(x_inv, t, y, v)))`.
pub fn vpcsm_gradient(
    x0: &Tensor,
    t: usize,
    conditions: &ConditionSet,
    backend: &dyn Denoiser,
    cfg: &LossConfig,
) -> Result<GradientReport> {
    if conditions.fusion_scale > 0.0 && conditions.visual.is_none() {
        return Err(Error::InvalidArgument(
            "vpcsm with tau > 0 needs a visual condition (use zero tokens for the null prompt)".into(),
        ));
    }
    inverted_guidance(x0, t, conditions, backend, cfg, &cfg.guidance, LossMode::Vpcsm)
}

/// Inputs to one gradient evaluation.
pub struct LossContext<'a> {
    pub x0: &'a Tensor,
    pub t: usize,
    pub conditions: &'a ConditionSet,
    pub backend: &'a dyn Denoiser,
    /// Source of SDS noise; deterministic modes never draw from it.
    pub rng: &'a mut dyn RngCore,
}

pub trait DistillationLoss: Send + Sync {
    fn mode(&self) -> LossMode;

    fn config(&self) -> &LossConfig;

    fn gradient(&self, ctx: LossContext<'_>) -> Result<GradientReport>;
}

macro_rules! loss_struct {
    ($name:ident) => {
        #[derive(Debug, Clone)]
        pub struct $name(pub LossConfig);
    };
}

loss_struct!(SdsLoss);
loss_struct!(DecomposedLoss);
loss_struct!(CsmLoss);
loss_struct!(VpcsmLoss);

impl DistillationLoss for SdsLoss {
    fn mode(&self) -> LossMode {
        LossMode::Sds
    }

    fn config(&self) -> &LossConfig {
        &self.0
    }

    fn gradient(&self, ctx: LossContext<'_>) -> Result<GradientReport> {
        let eps = randn(ctx.x0.shape(), ctx.rng);
        sds_gradient(ctx.x0, ctx.t, ctx.conditions, &eps, ctx.backend, &self.0)
    }
}

impl DistillationLoss for DecomposedLoss {
    fn mode(&self) -> LossMode {
        self.0.mode
    }

    fn config(&self) -> &LossConfig {
        &self.0
    }

    fn gradient(&self, ctx: LossContext<'_>) -> Result<GradientReport> {
        let eps = randn(ctx.x0.shape(), ctx.rng);
        decomposed_gradient(ctx.x0, ctx.t, ctx.conditions, &eps, ctx.backend, &self.0)
    }
}

impl DistillationLoss for CsmLoss {
    fn mode(&self) -> LossMode {
        LossMode::Csm
    }

    fn config(&self) -> &LossConfig {
        &self.0
    }

    fn gradient(&self, ctx: LossContext<'_>) -> Result<GradientReport> {
        csm_gradient(ctx.x0, ctx.t, ctx.conditions, ctx.backend, &self.0)
    }
}

impl DistillationLoss for VpcsmLoss {
    fn mode(&self) -> LossMode {
        LossMode::Vpcsm
    }

    fn config(&self) -> &LossConfig {
        &self.0
    }

    fn gradient(&self, ctx: LossContext<'_>) -> Result<GradientReport> {
        vpcsm_gradient(ctx.x0, ctx.t, ctx.conditions, ctx.backend, &self.0)
    }
}

pub type LossRegistry = Registry<LossConfig, dyn DistillationLoss>;

pub fn loss_registry() -> LossRegistry {
    let mut r = LossRegistry::new("loss mode");
    r.register("sds", |c: &LossConfig| Ok(Box::new(SdsLoss(c.clone())) as Box<dyn DistillationLoss>));
    for mode in [LossMode::CfgOnly, LossMode::DifOnly] {
        r.register(mode.name(), move |c: &LossConfig| {
            Ok(Box::new(DecomposedLoss(LossConfig { mode, ..c.clone() })) as Box<dyn DistillationLoss>)
        });
    }
    r.register("csm", |c: &LossConfig| Ok(Box::new(CsmLoss(c.clone())) as Box<dyn DistillationLoss>));
    r.register("vpcsm", |c: &LossConfig| Ok(Box::new(VpcsmLoss(c.clone())) as Box<dyn DistillationLoss>));
    r
}

/// Build the loss selected by `cfg.mode`.
pub fn build_loss(cfg: &LossConfig) -> Result<Box<dyn DistillationLoss>> {
    cfg.validate()?;
    loss_registry().build(cfg.mode.name(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{DenoiserCapabilities, MixtureDenoiser};
    use crate::conditioning::TextCondition;
    use crate::tensor::{from_vec, rel_l2, zeros};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Predicts a fixed noise regardless of input.
    struct Fixed {
        eps: Tensor,
        schedule: DiffusionSchedule,
    }

    impl Denoiser for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }

        fn capabilities(&self) -> DenoiserCapabilities {
            DenoiserCapabilities {
                supports_visual_condition: true,
                supports_perturbed_attention: true,
                concurrent_queries: true,
                latent_shape: self.eps.shape().to_vec(),
                horizon: self.schedule.horizon(),
                min_timestep: 0,
                visual_tokens: None,
                vocab: None,
                attention_blocks: vec![],
            }
        }

        fn schedule(&self) -> &DiffusionSchedule {
            &self.schedule
        }

        fn evaluate(&self, _: &DenoiserQuery<'_>) -> Result<Tensor> {
            Ok(self.eps.clone())
        }
    }

    fn prompt() -> ConditionSet {
        ConditionSet::text(TextCondition::Token(1))
    }

    #[test]
    fn exact_noise_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = randn(&[3], &mut rng);
        let b = Fixed {
            eps: eps.clone(),
            schedule: DiffusionSchedule::default(),
        };
        let x0 = randn(&[3], &mut rng);
        let r = sds_gradient(&x0, 400, &prompt(), &eps, &b, &LossConfig::new(LossMode::Sds)).unwrap();
        assert!(r.grad.iter().all(|v| v.abs() < 1e-12));
        for mode in [LossMode::CfgOnly, LossMode::DifOnly] {
            let r = decomposed_gradient(&x0, 400, &prompt(), &eps, &b, &LossConfig::new(mode)).unwrap();
            assert!(norm(&r.grad) < 1e-9, "{mode}: {}", norm(&r.grad));
        }
        for mode in [LossMode::Csm, LossMode::Vpcsm] {
            let cfg = LossConfig::new(mode);
            let r = build_loss(&cfg)
                .unwrap()
                .gradient(LossContext {
                    x0: &x0,
                    t: 400,
                    conditions: &prompt(),
                    backend: &b,
                    rng: &mut rng,
                })
                .unwrap();
            assert!(r.grad.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn additivity_on_mixture_oracle() {
        let b = MixtureDenoiser::standard().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x0 = randn(&[2], &mut rng);
            let eps = randn(&[2], &mut rng);
            let c = prompt();
            let sds = sds_gradient(&x0, 300, &c, &eps, &b, &LossConfig::new(LossMode::Sds)).unwrap();
            let dif = decomposed_gradient(&x0, 300, &c, &eps, &b, &LossConfig::new(LossMode::DifOnly)).unwrap();
            let cfg = decomposed_gradient(&x0, 300, &c, &eps, &b, &LossConfig::new(LossMode::CfgOnly)).unwrap();
            assert!(rel_l2(&(dif.grad + cfg.grad), &sds.grad) < 1e-9);
        }
    }

    #[test]
    fn csm_is_deterministic_and_sds_is_not() {
        let b = MixtureDenoiser::standard().unwrap();
        let x0 = from_vec(&[2], vec![0.2, -0.3]).unwrap();
        let cfg = LossConfig::new(LossMode::Csm);
        let a = csm_gradient(&x0, 530, &prompt(), &b, &cfg).unwrap();
        let again = csm_gradient(&x0, 530, &prompt(), &b, &cfg).unwrap();
        assert_eq!(a, again);
        let sds = build_loss(&LossConfig::new(LossMode::Sds)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut draw = || {
            sds.gradient(LossContext {
                x0: &x0,
                t: 530,
                conditions: &prompt(),
                backend: &b,
                rng: &mut rng,
            })
            .unwrap()
            .grad
        };
        assert_ne!(draw(), draw());
    }

    #[test]
    fn vpcsm_reduces_to_csm() {
        let b = MixtureDenoiser::standard().unwrap();
        let x0 = from_vec(&[2], vec![0.7, 0.1]).unwrap();
        let mut cfg = LossConfig::new(LossMode::Vpcsm);
        cfg.guidance.pag_scale = 0.0;
        let v = vpcsm_gradient(&x0, 250, &prompt(), &b, &cfg).unwrap();
        let c = csm_gradient(&x0, 250, &prompt(), &b, &cfg).unwrap();
        assert_eq!(v.grad, c.grad);
    }

    #[test]
    fn vpcsm_needs_hook_and_visual() {
        let b = MixtureDenoiser::standard().unwrap();
        let x0 = zeros(&[2]);
        let cfg = LossConfig::new(LossMode::Vpcsm);
        assert!(matches!(
            vpcsm_gradient(&x0, 250, &prompt(), &b, &cfg),
            Err(Error::Capability(_))
        ));
        let mut c = prompt();
        c.fusion_scale = 0.5;
        assert!(vpcsm_gradient(&x0, 250, &c, &b, &cfg).is_err());
    }

    #[test]
    fn registry_covers_every_mode() {
        let r = loss_registry();
        for m in LossMode::ALL {
            let loss = r.build(m.name(), &LossConfig::new(m)).unwrap();
            assert_eq!(loss.mode(), m);
            assert_eq!(m.name().parse::<LossMode>().unwrap(), m);
        }
        assert!("isd".parse::<LossMode>().is_err());
    }
}
