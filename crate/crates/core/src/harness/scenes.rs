//! Parametric toy scenes for the voxel renderer: fixtures for SGC runs and
//! training images for an image-space toy denoiser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::toy::ToyTrainConfig;
use crate::backends::ToyDenoiser;
use crate::datasets::ImagePool;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::render::{render_grid, CameraPose, Renderer, SceneParameters, VoxelRenderer};
use crate::sgc::MultiViewReference;
use crate::tensor::Tensor;

use super::SceneFixture;

/// An axis-aligned ellipsoid of uniform color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub color: [f64; 3],
}

pub const SCENE_COUNT: usize = 4;

pub fn toy_scene(index: usize) -> Result<Vec<Blob>> {
    let b = |center, radii, color| Blob { center, radii, color };
    Ok(match index {
        0 => vec![
            b([0.25, -0.1, 0.1], [0.45, 0.45, 0.45], [0.9, 0.2, 0.2]),
            b([-0.35, 0.3, -0.2], [0.3, 0.25, 0.4], [0.2, 0.3, 0.9]),
        ],
        1 => vec![b([0.0, 0.0, 0.0], [0.25, 0.6, 0.25], [0.2, 0.8, 0.3])],
        2 => vec![
            b([0.0, 0.35, 0.0], [0.3, 0.3, 0.3], [0.95, 0.85, 0.2]),
            b([0.0, -0.35, 0.0], [0.35, 0.3, 0.35], [0.2, 0.8, 0.85]),
        ],
        3 => vec![b([0.0, 0.0, 0.0], [0.6, 0.25, 0.35], [0.8, 0.3, 0.8])],
        _ => {
            return Err(Error::InvalidArgument(format!(
                "toy scene {index} does not exist (0..{SCENE_COUNT})"
            )))
        }
    })
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(0.05, 0.95);
    (p / (1.0 - p)).ln()
}

/// Raw voxel parameters: density `8 (1 − q)` clamped to [-6, 4], where q is the
/// nearest blob's normalised squared radius; color of the nearest blob.
pub fn scene_params(blobs: &[Blob], renderer: &VoxelRenderer) -> Result<SceneParameters> {
    let n = renderer.config().grid;
    let n3 = n * n * n;
    let mut values = vec![0.0; n3 * 4];
    let coord = |i: usize| -1.0 + (i as f64 + 0.5) * 2.0 / n as f64;
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let p = [coord(x), coord(y), coord(z)];
                let (q, blob) = blobs
                    .iter()
                    .map(|b| {
                        let q: f64 = (0..3).map(|a| ((p[a] - b.center[a]) / b.radii[a]).powi(2)).sum();
                        (q, b)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .ok_or_else(|| Error::InvalidArgument("scene needs at least one blob".into()))?;
                let v = (x * n + y) * n + z;
                values[v] = (8.0 * (1.0 - q)).clamp(-6.0, 4.0);
                for c in 0..3 {
                    values[n3 + v * 3 + c] = logit(blob.color[c]);
                }
            }
        }
    }
    SceneParameters::new(values, renderer.layout())
}

/// Target scene, its canonical-view reference grid and a front-view visual prompt.
pub fn scene_fixture(index: usize, renderer: &VoxelRenderer, elevation: f64) -> Result<SceneFixture> {
    let target = scene_params(&toy_scene(index)?, renderer)?;
    let (views, _) = render_grid(&target, renderer, elevation)?;
    let visual_image = views[0].clone();
    Ok(SceneFixture {
        label: index,
        reference: MultiViewReference::new(views, format!("toy-scene-{index}"))?,
        visual_image: Some(visual_image),
        target: Some(target),
    })
}

/// Renders of every toy scene from uniformly random azimuths.
pub fn scene_image_pool(renderer: &VoxelRenderer, per_scene: usize, elevation: f64, seed: u64) -> Result<ImagePool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(per_scene * SCENE_COUNT);
    let mut labels = Vec::with_capacity(per_scene * SCENE_COUNT);
    for k in 0..SCENE_COUNT {
        let params = scene_params(&toy_scene(k)?, renderer)?;
        for _ in 0..per_scene {
            let pose = CameraPose::new(rng.random_range(0.0..360.0), elevation)?;
            let img: Tensor = renderer.render(&params, &pose)?;
            images.push(img.iter().copied().collect());
            labels.push(k);
        }
    }
    ImagePool::new(images, labels)
}

/// Image-space toy denoiser trained on [`scene_image_pool`] renders, one label per scene.
pub fn train_scene_denoiser(
    renderer: &VoxelRenderer,
    elevation: f64,
    train: &ToyTrainConfig,
    seed: u64,
) -> Result<ToyDenoiser> {
    let pool = scene_image_pool(renderer, 64, elevation, seed)?;
    ToyDenoiser::init(&renderer.image_shape(), SCENE_COUNT, DiffusionSchedule::default(), seed)?.train(&pool, train, seed)
}
