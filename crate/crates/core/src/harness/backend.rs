//! Backends as the runner sees them: a denoiser plus whatever it offers for
//! turning images into visual tokens.

use std::path::Path;

use ndarray::Array2;

use crate::backends::{Denoiser, ExternalDenoiser, MixtureDenoiser, ToyDenoiser};
use crate::conditioning::PromptSource;
use crate::error::{Error, Result};
use crate::tensor::{from_vec, Tensor};

use super::ExperimentConfig;

pub enum LoadedBackend {
    Toy(ToyDenoiser),
    Oracle(MixtureDenoiser),
    External(ExternalDenoiser),
}

/// Steps used when generating a self-guidance image.
pub const SELF_GUIDANCE_STEPS: usize = 50;

impl LoadedBackend {
    /// Build the backend named in `config`.
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        Self::open(&config.backend, config.backend_weights.as_deref())
    }

    pub fn open(name: &str, weights: Option<&Path>) -> Result<Self> {
        match name {
            "toy" => {
                let path = weights.ok_or_else(|| Error::Config("the toy backend needs a weights file".into()))?;
                Ok(Self::Toy(ToyDenoiser::load(path)?))
            }
            "mixture-oracle" => Ok(Self::Oracle(MixtureDenoiser::standard()?)),
            "external" => Ok(Self::External(match weights {
                Some(dir) => ExternalDenoiser::open(dir, "cpu")?,
                None => ExternalDenoiser::from_env("cpu")?,
            })),
            other => Err(Error::UnknownName {
                kind: "backend",
                name: other.to_string(),
                known: crate::backends::backend_registry().names().collect::<Vec<_>>().join(", "),
            }),
        }
    }

    pub fn denoiser(&self) -> &dyn Denoiser {
        match self {
            Self::Toy(d) => d,
            Self::Oracle(d) => d,
            Self::External(d) => d,
        }
    }

    /// Visual tokens for an image prompt.
    pub fn embed(&self, image: &Tensor, source: PromptSource) -> Result<Array2<f64>> {
        match self {
            Self::Toy(d) => Ok(d.visual_pipeline().embed(image, source)?.embedding),
            Self::External(d) => d.embed_image(image),
            Self::Oracle(_) => Err(Error::Capability("the mixture oracle takes no visual prompts".into())),
        }
    }

    /// Generate a self-guidance image from the prompt text.
    pub fn self_guidance_image(&self, prompt: &str, seed: u64) -> Result<Tensor> {
        match self {
            Self::External(d) => d.generate(prompt, SELF_GUIDANCE_STEPS, seed),
            _ => Err(Error::Capability(
                "self-guidance needs a text-to-image model; only the external adapter provides one".into(),
            )),
        }
    }

    /// Visual tokens requested by the config: a reference image file, a
    /// self-guidance image, or `fallback` (a reference image supplied by the caller).
    pub fn visual_tokens(&self, config: &ExperimentConfig, fallback: Option<&Tensor>) -> Result<Option<Array2<f64>>> {
        let c = &config.conditioning;
        if c.self_guidance && c.visual_prompt.is_some() {
            return Err(Error::Config(
                "choose either a visual prompt image or self-guidance, not both".into(),
            ));
        }
        if c.self_guidance {
            let image = self.self_guidance_image(&c.reward_prompt(), config.seed)?;
            return self.embed(&image, PromptSource::SelfGuidance).map(Some);
        }
        if let Some(path) = &c.visual_prompt {
            let shape = self.denoiser().capabilities().latent_shape;
            let image = match self {
                Self::External(_) => load_png(path, None)?,
                _ => load_png(path, Some(&shape))?,
            };
            return self.embed(&image, PromptSource::Reference).map(Some);
        }
        match fallback {
            Some(image) => self.embed(image, PromptSource::Reference).map(Some),
            None => Ok(None),
        }
    }
}

/// Read a PNG as H × W × 3 in [0, 1], resized to `shape` when one is given.
pub fn load_png(path: &Path, shape: Option<&[usize]>) -> Result<Tensor> {
    let mut img = image::open(path)?.to_rgb8();
    if let Some(shape) = shape {
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::Capability(format!(
                "visual prompt images need an H x W x 3 sample shape, the backend uses {shape:?}"
            )));
        }
        let (h, w) = (shape[0] as u32, shape[1] as u32);
        if img.dimensions() != (w, h) {
            img = image::imageops::resize(&img, w, h, image::imageops::FilterType::Triangle);
        }
    }
    let (w, h) = img.dimensions();
    let data = img.pixels().flat_map(|p| p.0.map(|v| v as f64 / 255.0)).collect();
    from_vec(&[h as usize, w as usize, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::save_png;

    #[test]
    fn png_round_trip_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = from_vec(&[2, 3, 3], (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_png(&path, None).unwrap();
        assert_eq!(back.shape(), &[2, 3, 3]);
        assert!(crate::tensor::max_abs_diff(&back, &img) < 0.5 / 255.0 + 1e-12);
        assert_eq!(load_png(&path, Some(&[4, 4, 3])).unwrap().shape(), &[4, 4, 3]);
        assert!(matches!(load_png(&path, Some(&[2])), Err(Error::Capability(_))));
    }

    #[test]
    fn self_guidance_needs_external() {
        let b = LoadedBackend::open("mixture-oracle", None).unwrap();
        let mut cfg = ExperimentConfig::default_2d();
        cfg.conditioning.self_guidance = true;
        assert!(matches!(b.visual_tokens(&cfg, None), Err(Error::Capability(_))));
        cfg.conditioning.self_guidance = false;
        assert_eq!(b.visual_tokens(&cfg, None).unwrap(), None);
    }
}
