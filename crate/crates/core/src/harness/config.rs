use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{ConditionSet, TextCondition};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::losses::{LossConfig, LossMode, Weighting};
use crate::render::{VoxelConfig, DEFAULT_ELEVATION};
use crate::sgc::{ExtractorNames, SGCWeights};
use crate::timestep::{TimestepWindow, DEFAULT_WARMUP_FRACTION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub mode: LossMode,
    pub omega: Weighting,
    pub delta_t: usize,
    pub uncond_keeps_visual: bool,
    pub conditional_inversion: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let c = LossConfig::new(LossMode::Csm);
        Self {
            mode: c.mode,
            omega: c.omega,
            delta_t: c.delta_t,
            uncond_keeps_visual: c.uncond_keeps_visual,
            conditional_inversion: c.conditional_inversion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningSection {
    /// Prompt-vocabulary index (class label for toy backends).
    pub label: Option<usize>,
    /// Prompt text; used when `label` is unset and by the reward model.
    pub prompt: String,
    /// Visual fusion scale τ.
    pub tau: f64,
    pub visual_prompt: Option<PathBuf>,
    pub self_guidance: bool,
}

impl Default for ConditioningSection {
    fn default() -> Self {
        Self {
            label: Some(0),
            prompt: String::new(),
            tau: 0.5,
            visual_prompt: None,
            self_guidance: false,
        }
    }
}

impl ConditioningSection {
    pub fn text(&self) -> TextCondition {
        match (self.label, self.prompt.is_empty()) {
            (Some(l), _) => TextCondition::Token(l),
            (None, false) => TextCondition::Prompt(self.prompt.clone()),
            (None, true) => TextCondition::Null,
        }
    }

    pub fn conditions(&self, visual: Option<ndarray::Array2<f64>>) -> ConditionSet {
        let base = ConditionSet::text(self.text());
        match visual {
            Some(v) => base.with_visual(v, self.tau),
            None => ConditionSet {
                fusion_scale: 0.0,
                ..base
            },
        }
    }

    /// Text handed to the reward model.
    pub fn reward_prompt(&self) -> String {
        match (&self.label, self.prompt.is_empty()) {
            (_, false) => self.prompt.clone(),
            (Some(l), true) => format!("class {l}"),
            (None, true) => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgcSection {
    pub lambda_geo: f64,
    pub lambda_sem: f64,
    pub lambda_ir: f64,
    /// Score the 2 × 2 composite rather than each view.
    pub reward_on_grid: bool,
    pub extractors: ExtractorNames,
}

impl Default for SgcSection {
    fn default() -> Self {
        let w = SGCWeights::default();
        Self {
            lambda_geo: w.lambda_geo,
            lambda_sem: w.lambda_sem,
            lambda_ir: w.lambda_ir,
            reward_on_grid: true,
            extractors: ExtractorNames::default(),
        }
    }
}

impl SgcSection {
    pub fn weights(&self) -> SGCWeights {
        SGCWeights {
            lambda_geo: self.lambda_geo,
            lambda_sem: self.lambda_sem,
            lambda_ir: self.lambda_ir,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub t_min_up: f64,
    pub t_max_up: f64,
    pub t_min_low: f64,
    pub t_max_low: f64,
    pub warmup_fraction: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let w = TimestepWindow::new(1, DEFAULT_WARMUP_FRACTION).expect("default window");
        Self {
            t_min_up: w.t_min_up,
            t_max_up: w.t_max_up,
            t_min_low: w.t_min_low,
            t_max_low: w.t_max_low,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    /// Standard deviation of the Gaussian initialisation of θ.
    pub scale: f64,
}

impl Default for InitSection {
    fn default() -> Self {
        Self { scale: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    /// Image shape for the latent-image renderer.
    pub image_shape: Vec<usize>,
    pub voxel: VoxelConfig,
    pub poses_per_step: usize,
    pub elevation: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            image_shape: vec![2],
            voxel: VoxelConfig::default(),
            poses_per_step: 4,
            elevation: DEFAULT_ELEVATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub iterations: usize,
    pub step_size: f64,
    pub snapshot_every: usize,
    pub renderer: String,
    pub backend: String,
    pub backend_weights: Option<PathBuf>,
    pub loss: LossSection,
    pub guidance: GuidanceConfig,
    pub conditioning: ConditioningSection,
    pub sgc: SgcSection,
    pub schedule: ScheduleSection,
    pub init: InitSection,
    pub scene: SceneSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::default_2d()
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// 2D distillation defaults: Adam step 0.001 for 500 steps on the latent-image renderer.
    pub fn default_2d() -> Self {
        Self {
            seed: 0,
            iterations: 500,
            step_size: 0.001,
            snapshot_every: 100,
            renderer: "latent-image".into(),
            backend: "toy".into(),
            backend_weights: None,
            loss: LossSection::default(),
            guidance: GuidanceConfig {
                pag_scale: 0.0,
                ..GuidanceConfig::default()
            },
            conditioning: ConditioningSection::default(),
            sgc: SgcSection::default(),
            schedule: ScheduleSection::default(),
            init: InitSection::default(),
            scene: SceneSection::default(),
        }
    }

    /// Toy 3D defaults: VPCSM + SGC on the voxel renderer, step 0.01 for 2000 steps.
    pub fn default_3d() -> Self {
        Self {
            iterations: 2000,
            step_size: 0.01,
            snapshot_every: 500,
            renderer: "voxel".into(),
            loss: LossSection {
                mode: LossMode::Vpcsm,
                ..LossSection::default()
            },
            guidance: GuidanceConfig::default(),
            init: InitSection { scale: 0.1 },
            ..Self::default_2d()
        }
    }

    /// Overlay TOML text on `base`; unknown keys are errors.
    pub fn from_toml_str(text: &str, base: &Self) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut value = toml::Value::try_from(base).map_err(|e| Error::Config(format!("{e}")))?;
        merge(&mut value, toml::Value::Table(overlay));
        let cfg: Self = value.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &Self) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, base).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if self.snapshot_every < 1 {
            return Err(Error::Config("snapshot_every must be >= 1".into()));
        }
        if !(self.init.scale.is_finite() && self.init.scale >= 0.0) {
            return Err(Error::Config("init.scale must be finite and >= 0".into()));
        }
        if !(self.conditioning.tau.is_finite() && self.conditioning.tau >= 0.0) {
            return Err(Error::Config("conditioning.tau must be finite and >= 0".into()));
        }
        if self.scene.poses_per_step < 1 {
            return Err(Error::Config("scene.poses_per_step must be >= 1".into()));
        }
        self.loss_config().validate()?;
        self.sgc.weights().validate()?;
        self.window()?;
        let renderers = crate::render::renderer_registry().names().map(str::to_string).collect::<Vec<_>>();
        let backends = crate::backends::backend_registry().names().map(str::to_string).collect::<Vec<_>>();
        for (kind, name, known) in [("renderer", &self.renderer, renderers), ("backend", &self.backend, backends)] {
            if !known.iter().any(|k| k == name) {
                return Err(Error::UnknownName {
                    kind,
                    name: name.clone(),
                    known: known.join(", "),
                });
            }
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            mode: self.loss.mode,
            omega: self.loss.omega,
            guidance: self.guidance.clone(),
            delta_t: self.loss.delta_t,
            uncond_keeps_visual: self.loss.uncond_keeps_visual,
            conditional_inversion: self.loss.conditional_inversion,
        }
    }

    pub fn window(&self) -> Result<TimestepWindow> {
        let s = &self.schedule;
        let w = TimestepWindow {
            t_min_up: s.t_min_up,
            t_max_up: s.t_max_up,
            t_min_low: s.t_min_low,
            t_max_low: s.t_max_low,
            warmup_steps: crate::timestep::warmup_steps(self.iterations, s.warmup_fraction),
            total_steps: self.iterations,
        };
        w.validate()?;
        Ok(w)
    }

    /// SHA-256 of the canonical JSON encoding; covers every input including the seed.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}
