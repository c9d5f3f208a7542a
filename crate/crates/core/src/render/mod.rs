//! Differentiable renderers g(θ, c), scene parameters and camera poses.

mod latent;
mod voxel;

use std::fmt;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::tensor::Tensor;

pub use latent::LatentImageRenderer;
pub use voxel::{VoxelConfig, VoxelRenderer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanonicalView {
    Front,
    Right,
    Back,
    Left,
}

impl CanonicalView {
    /// Grid arrangement order: [[front, right], [left, back]].
    pub const GRID_ORDER: [CanonicalView; 4] = [
        CanonicalView::Front,
        CanonicalView::Right,
        CanonicalView::Left,
        CanonicalView::Back,
    ];

    pub fn azimuth(&self) -> f64 {
        match self {
            CanonicalView::Front => 0.0,
            CanonicalView::Right => 90.0,
            CanonicalView::Back => 180.0,
            CanonicalView::Left => 270.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CanonicalView::Front => "front",
            CanonicalView::Right => "right",
            CanonicalView::Back => "back",
            CanonicalView::Left => "left",
        }
    }
}

impl fmt::Display for CanonicalView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Degrees in [0, 360).
    pub azimuth: f64,
    /// Degrees.
    pub elevation: f64,
    pub tag: Option<CanonicalView>,
}

/// Elevation used for canonical and sampled toy poses.
pub const DEFAULT_ELEVATION: f64 = 15.0;

impl CameraPose {
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self> {
        let pose = Self {
            azimuth: azimuth.rem_euclid(360.0),
            elevation,
            tag: None,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn canonical(view: CanonicalView, elevation: f64) -> Self {
        Self {
            azimuth: view.azimuth(),
            elevation,
            tag: Some(view),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.azimuth.is_finite() && (0.0..360.0).contains(&self.azimuth)) {
            return Err(Error::InvalidArgument(format!("azimuth {} outside [0, 360)", self.azimuth)));
        }
        if !self.elevation.is_finite() {
            return Err(Error::InvalidArgument("elevation must be finite".into()));
        }
        if let Some(tag) = self.tag {
            if tag.azimuth() != self.azimuth {
                return Err(Error::InvalidArgument(format!(
                    "pose tagged {tag} must have azimuth {}",
                    tag.azimuth()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named, disjoint, covering slices of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn from_shapes(shapes: &[(&str, Vec<usize>)]) -> Self {
        let mut offset = 0;
        let entries = shapes
            .iter()
            .map(|(name, shape)| {
                let e = LayoutEntry {
                    name: name.to_string(),
                    offset,
                    shape: shape.clone(),
                };
                offset += e.len();
                e
            })
            .collect();
        Self { entries }
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(LayoutEntry::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for e in &self.entries {
            if e.offset != next {
                return Err(Error::InvalidArgument(format!(
                    "layout slice `{}` starts at {} instead of {next}",
                    e.name, e.offset
                )));
            }
            next += e.len();
        }
        Ok(())
    }
}

/// Flat scene parameter vector θ with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParameters {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl SceneParameters {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        layout.validate()?;
        if values.len() != layout.total() {
            return Err(Error::shape("scene parameters", &[layout.total()], &[values.len()]));
        }
        Ok(Self { values, layout })
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|e| &self.values[e.offset..e.offset + e.len()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub renderer: String,
    pub step: usize,
    pub params: SceneParameters,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub trait Renderer: Send + Sync {
    fn id(&self) -> &str;

    fn image_shape(&self) -> Vec<usize>;

    fn layout(&self) -> Layout;

    fn init(&self, rng: &mut dyn RngCore, scale: f64) -> SceneParameters;

    fn check_pose(&self, pose: &CameraPose) -> Result<()> {
        pose.validate()
    }

    fn render(&self, theta: &SceneParameters, pose: &CameraPose) -> Result<Tensor>;

    /// ∂⟨grad_image, render(θ, pose)⟩ / ∂θ.
    fn backward(&self, theta: &SceneParameters, pose: &CameraPose, grad_image: &Tensor) -> Result<Vec<f64>>;

    /// Expected ray-termination depth, for renderers with geometry.
    fn depth(&self, _theta: &SceneParameters, _pose: &CameraPose) -> Result<Option<Tensor>> {
        Ok(None)
    }

    fn check_params(&self, theta: &SceneParameters) -> Result<()> {
        if theta.layout != self.layout() {
            return Err(Error::InvalidArgument(format!(
                "scene layout does not match renderer `{}`",
                self.id()
            )));
        }
        Ok(())
    }
}

/// Arguments for building a renderer by name.
#[derive(Debug, Clone, PartialEq)]
pub struct RendererSpec {
    pub image_shape: Vec<usize>,
    pub voxel: VoxelConfig,
}

impl Default for RendererSpec {
    fn default() -> Self {
        Self {
            image_shape: vec![2],
            voxel: VoxelConfig::default(),
        }
    }
}

pub type RendererRegistry = Registry<RendererSpec, dyn Renderer>;

pub fn renderer_registry() -> RendererRegistry {
    let mut r = RendererRegistry::new("renderer");
    r.register("latent-image", |s: &RendererSpec| {
        Ok(Box::new(LatentImageRenderer::new(s.image_shape.clone())?) as Box<dyn Renderer>)
    });
    r.register("voxel", |s: &RendererSpec| Ok(Box::new(VoxelRenderer::new(s.voxel.clone())?) as Box<dyn Renderer>));
    r
}

/// Four canonical views in grid order, plus the poses used.
pub fn render_grid(
    theta: &SceneParameters,
    renderer: &dyn Renderer,
    elevation: f64,
) -> Result<(Vec<Tensor>, Vec<CameraPose>)> {
    let poses: Vec<CameraPose> = CanonicalView::GRID_ORDER
        .iter()
        .map(|v| CameraPose::canonical(*v, elevation))
        .collect();
    let views = poses.iter().map(|p| renderer.render(theta, p)).collect::<Result<Vec<_>>>()?;
    Ok((views, poses))
}

/// Write an H × W × 3 image (values clamped to [0, 1]) as PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let rgb = to_rgb8(image)?;
    rgb.save(path)?;
    Ok(())
}

pub fn to_rgb8(image: &Tensor) -> Result<image::RgbImage> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape("PNG export", &[0, 0, 3], shape));
    }
    let (h, w) = (shape[0], shape[1]);
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}
