//! Denoiser abstraction and the shipped backends.

pub mod external;
pub mod mixture;
pub mod toy;

use std::path::PathBuf;

use serde::Serialize;

use crate::conditioning::ConditionSet;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::guidance::PagBlocks;
use crate::registry::Registry;
use crate::tensor::{ensure_finite, ensure_same_shape, Tensor};

pub use external::ExternalDenoiser;
pub use mixture::MixtureDenoiser;
pub use toy::ToyDenoiser;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenoiserCapabilities {
    pub supports_visual_condition: bool,
    pub supports_perturbed_attention: bool,
    pub concurrent_queries: bool,
    pub latent_shape: Vec<usize>,
    pub horizon: usize,
    /// Smallest timestep the backend accepts; t = 0 queries are raised to it.
    pub min_timestep: usize,
    /// (tokens, width) of the visual condition, when supported.
    pub visual_tokens: Option<(usize, usize)>,
    /// Prompt vocabulary size for token-indexed text conditions.
    pub vocab: Option<usize>,
    pub attention_blocks: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiserQuery<'a> {
    pub x: &'a Tensor,
    pub t: usize,
    pub conditions: &'a ConditionSet,
    pub perturb_attention: bool,
    pub pag_blocks: &'a PagBlocks,
}

impl<'a> DenoiserQuery<'a> {
    pub fn new(x: &'a Tensor, t: usize, conditions: &'a ConditionSet) -> Self {
        static ALL: PagBlocks = PagBlocks::All;
        Self {
            x,
            t,
            conditions,
            perturb_attention: false,
            pag_blocks: &ALL,
        }
    }

    pub fn perturbed(mut self, blocks: &'a PagBlocks) -> Self {
        self.perturb_attention = true;
        self.pag_blocks = blocks;
        self
    }
}

/// Conditional noise-prediction network ε(x_t, t, y, v).
pub trait Denoiser: Send + Sync {
    fn id(&self) -> &str;

    fn capabilities(&self) -> DenoiserCapabilities;

    fn schedule(&self) -> &DiffusionSchedule;

    /// Raw evaluation; callers go through [`predict`], which validates the query.
    fn evaluate(&self, query: &DenoiserQuery<'_>) -> Result<Tensor>;
}

/// Validated prediction: checks the query against the capability record,
/// raises t below `min_timestep`, and attaches the timestep to failures.
pub fn predict(backend: &dyn Denoiser, query: &DenoiserQuery<'_>) -> Result<Tensor> {
    let caps = backend.capabilities();
    let t = query.t;
    let wrap = |e: Error| Error::Backend { t, source: Box::new(e) };
    if query.x.shape() != caps.latent_shape.as_slice() {
        return Err(wrap(Error::shape("denoiser query", &caps.latent_shape, query.x.shape())));
    }
    if t > caps.horizon {
        return Err(wrap(Error::TimestepOutOfRange {
            t,
            min: 0,
            max: caps.horizon,
        }));
    }
    if query.perturb_attention && !caps.supports_perturbed_attention {
        return Err(wrap(Error::Capability(format!(
            "backend `{}` has no perturbed-attention hook",
            backend.id()
        ))));
    }
    query.conditions.validate().map_err(wrap)?;
    if query.conditions.has_visual() && query.conditions.fusion_scale > 0.0 && !caps.supports_visual_condition {
        return Err(wrap(Error::Capability(format!(
            "backend `{}` does not accept visual conditions",
            backend.id()
        ))));
    }
    let q = DenoiserQuery {
        t: t.max(caps.min_timestep),
        ..*query
    };
    let out = backend.evaluate(&q).map_err(wrap)?;
    ensure_same_shape("denoiser output", query.x, &out).map_err(wrap)?;
    ensure_finite("denoiser output", &out).map_err(wrap)?;
    Ok(out)
}

/// Arguments for constructing a backend by name.
#[derive(Debug, Clone, Default)]
pub struct BackendSpec {
    pub weights: Option<PathBuf>,
    pub device: Option<String>,
}

pub type BackendRegistry = Registry<BackendSpec, dyn Denoiser>;

/// Registry with `toy`, `mixture-oracle` and `external`.
pub fn backend_registry() -> BackendRegistry {
    let mut r = BackendRegistry::new("backend");
    r.register("toy", |spec: &BackendSpec| {
        let path = spec
            .weights
            .as_ref()
            .ok_or_else(|| Error::Config("the toy backend needs a weights file".into()))?;
        Ok(Box::new(ToyDenoiser::load(path)?) as Box<dyn Denoiser>)
    });
    r.register("mixture-oracle", |_: &BackendSpec| {
        Ok(Box::new(MixtureDenoiser::standard()?) as Box<dyn Denoiser>)
    });
    r.register("external", |spec: &BackendSpec| {
        let device = spec.device.clone().unwrap_or_else(|| "cpu".into());
        Ok(Box::new(ExternalDenoiser::from_env(&device)?) as Box<dyn Denoiser>)
    });
    r
}
