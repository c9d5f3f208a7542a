use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{CameraPose, Layout, Renderer, SceneParameters};
use crate::error::{Error, Result};
use crate::tensor::{from_vec, randn, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelConfig {
    /// Voxels per side; the grid spans [-1, 1]³.
    pub grid: usize,
    /// Square image side in pixels.
    pub image: usize,
    pub samples_per_ray: usize,
    /// σ = density_scale · softplus(raw).
    pub density_scale: f64,
    /// Half-width of the orthographic view plane.
    pub extent: f64,
    pub background: [f64; 3],
    /// Raw density offset used by `init`.
    pub init_density_bias: f64,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            image: 16,
            samples_per_ray: 32,
            density_scale: 10.0,
            extent: 1.2,
            background: [1.0; 3],
            init_density_bias: -3.0,
        }
    }
}

pub const MAX_GRID: usize = 32;
pub const MAX_IMAGE: usize = 64;

/// Distance from the origin to the ray start plane.
const NEAR: f64 = 1.8;

/// Emission-absorption volume renderer over a dense grid with softplus
/// density, sigmoid color and an orthographic camera.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelRenderer {
    config: VoxelConfig,
}

struct Corner {
    voxel: usize,
    weight: f64,
    /// Weight renormalised over in-grid corners, so color near the boundary is not darkened.
    color_weight: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl VoxelRenderer {
    pub fn new(config: VoxelConfig) -> Result<Self> {
        let c = &config;
        if c.grid < 2 || c.grid > MAX_GRID {
            return Err(Error::InvalidArgument(format!("voxel grid {} outside [2, {MAX_GRID}]", c.grid)));
        }
        if c.image == 0 || c.image > MAX_IMAGE {
            return Err(Error::InvalidArgument(format!("image side {} outside [1, {MAX_IMAGE}]", c.image)));
        }
        if c.samples_per_ray == 0 || !(c.density_scale > 0.0) || !(c.extent > 0.0) {
            return Err(Error::InvalidArgument("voxel renderer needs positive samples, density scale and extent".into()));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &VoxelConfig {
        &self.config
    }

    fn step(&self) -> f64 {
        2.0 * NEAR / self.config.samples_per_ray as f64
    }

    /// Camera basis (toward-camera, right, up) for a pose.
    fn basis(pose: &CameraPose) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let (az, el) = (pose.azimuth.to_radians(), pose.elevation.to_radians());
        let o = [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()];
        let r = [az.cos(), 0.0, -az.sin()];
        let u = [
            o[1] * r[2] - o[2] * r[1],
            o[2] * r[0] - o[0] * r[2],
            o[0] * r[1] - o[1] * r[0],
        ];
        (o, r, u)
    }

    /// Corners of every sample along the ray through pixel (i, j).
    fn ray_corners(&self, pose: &CameraPose, i: usize, j: usize, out: &mut Vec<Vec<Corner>>) {
        let c = &self.config;
        let n = c.grid;
        let (o, r, u) = Self::basis(pose);
        let side = c.image as f64;
        let s = ((j as f64 + 0.5) / side * 2.0 - 1.0) * c.extent;
        let v = (1.0 - (i as f64 + 0.5) / side * 2.0) * c.extent;
        let delta = self.step();
        out.clear();
        for k in 0..c.samples_per_ray {
            let dist = (k as f64 + 0.5) * delta;
            let mut g = [0.0; 3];
            for a in 0..3 {
                let p = (NEAR - dist) * o[a] + s * r[a] + v * u[a];
                g[a] = (p + 1.0) * n as f64 / 2.0 - 0.5;
            }
            let mut corners = Vec::with_capacity(8);
            let base = g.map(|x| x.floor());
            let frac = [g[0] - base[0], g[1] - base[1], g[2] - base[2]];
            for corner in 0..8 {
                let mut weight = 1.0;
                let mut idx = [0usize; 3];
                let mut inside = true;
                for a in 0..3 {
                    let hi = (corner >> a) & 1 == 1;
                    let ia = base[a] as i64 + hi as i64;
                    if ia < 0 || ia >= n as i64 {
                        inside = false;
                        break;
                    }
                    idx[a] = ia as usize;
                    weight *= if hi { frac[a] } else { 1.0 - frac[a] };
                }
                if inside && weight > 0.0 {
                    corners.push(Corner {
                        voxel: (idx[0] * n + idx[1]) * n + idx[2],
                        weight,
                        color_weight: 0.0,
                    });
                }
            }
            let total: f64 = corners.iter().map(|c| c.weight).sum();
            for corner in &mut corners {
                corner.color_weight = corner.weight / total;
            }
            out.push(corners);
        }
    }

    fn activated(&self, theta: &SceneParameters) -> (Vec<f64>, Vec<f64>) {
        let n3 = self.config.grid.pow(3);
        let sigma = theta.values[..n3]
            .iter()
            .map(|&a| self.config.density_scale * softplus(a))
            .collect();
        let color = theta.values[n3..].iter().map(|&c| sigmoid(c)).collect();
        (sigma, color)
    }

    /// Per-sample density and color along one ray.
    fn samples(corners: &[Vec<Corner>], sigma: &[f64], color: &[f64]) -> (Vec<f64>, Vec<[f64; 3]>) {
        let mut s = Vec::with_capacity(corners.len());
        let mut c = Vec::with_capacity(corners.len());
        for cs in corners {
            let mut sk = 0.0;
            let mut ck = [0.0; 3];
            for corner in cs {
                sk += corner.weight * sigma[corner.voxel];
                for ch in 0..3 {
                    ck[ch] += corner.color_weight * color[corner.voxel * 3 + ch];
                }
            }
            s.push(sk);
            c.push(ck);
        }
        (s, c)
    }

    /// Transmittance before each sample plus the final one (length M + 1).
    fn transmittance(sigma: &[f64], delta: f64) -> Vec<f64> {
        let mut t = Vec::with_capacity(sigma.len() + 1);
        let mut acc = 0.0;
        t.push(1.0);
        for &s in sigma {
            acc += s * delta;
            t.push((-acc).exp());
        }
        t
    }

    fn prepare(&self, theta: &SceneParameters, pose: &CameraPose) -> Result<()> {
        self.check_params(theta)?;
        self.check_pose(pose)?;
        if !theta.is_finite() {
            return Err(Error::non_finite("voxel parameters"));
        }
        Ok(())
    }
}

impl Renderer for VoxelRenderer {
    fn id(&self) -> &str {
        "voxel"
    }

    fn image_shape(&self) -> Vec<usize> {
        vec![self.config.image, self.config.image, 3]
    }

    fn layout(&self) -> Layout {
        let n = self.config.grid;
        Layout::from_shapes(&[("density", vec![n, n, n]), ("color", vec![n, n, n, 3])])
    }

    fn init(&self, rng: &mut dyn RngCore, scale: f64) -> SceneParameters {
        let layout = self.layout();
        let n3 = self.config.grid.pow(3);
        let values = randn(&[layout.total()], rng)
            .iter()
            .enumerate()
            .map(|(i, v)| if i < n3 { self.config.init_density_bias + scale * v } else { scale * v })
            .collect();
        SceneParameters::new(values, layout).expect("layout matches")
    }

    fn check_pose(&self, pose: &CameraPose) -> Result<()> {
        pose.validate()?;
        if pose.elevation.abs() >= 89.0 {
            return Err(Error::InvalidArgument(format!(
                "voxel renderer supports |elevation| < 89, got {}",
                pose.elevation
            )));
        }
        Ok(())
    }

    fn render(&self, theta: &SceneParameters, pose: &CameraPose) -> Result<Tensor> {
        self.prepare(theta, pose)?;
        let c = &self.config;
        let (sigma, color) = self.activated(theta);
        let delta = self.step();
        let mut out = Vec::with_capacity(c.image * c.image * 3);
        let mut corners = Vec::new();
        for i in 0..c.image {
            for j in 0..c.image {
                self.ray_corners(pose, i, j, &mut corners);
                let (s, col) = Self::samples(&corners, &sigma, &color);
                let tr = Self::transmittance(&s, delta);
                let mut px = [0.0; 3];
                for k in 0..s.len() {
                    let w = tr[k] - tr[k + 1];
                    for ch in 0..3 {
                        px[ch] += w * col[k][ch];
                    }
                }
                let t_end = tr[s.len()];
                for ch in 0..3 {
                    out.push(px[ch] + t_end * c.background[ch]);
                }
            }
        }
        from_vec(&self.image_shape(), out)
    }

    fn backward(&self, theta: &SceneParameters, pose: &CameraPose, grad_image: &Tensor) -> Result<Vec<f64>> {
        self.prepare(theta, pose)?;
        if grad_image.shape() != self.image_shape().as_slice() {
            return Err(Error::shape("voxel image gradient", &self.image_shape(), grad_image.shape()));
        }
        let c = &self.config;
        let n3 = c.grid.pow(3);
        let (sigma, color) = self.activated(theta);
        let delta = self.step();
        let mut d_sigma = vec![0.0; n3];
        let mut d_color = vec![0.0; n3 * 3];
        let mut corners = Vec::new();
        for i in 0..c.image {
            for j in 0..c.image {
                let g = [grad_image[[i, j, 0]], grad_image[[i, j, 1]], grad_image[[i, j, 2]]];
                if g == [0.0; 3] {
                    continue;
                }
                self.ray_corners(pose, i, j, &mut corners);
                let (s, col) = Self::samples(&corners, &sigma, &color);
                let m = s.len();
                let tr = Self::transmittance(&s, delta);
                // behind[k] = Σ_{i>k} w_i c_i + T_M · background, per channel, dotted with g.
                let mut behind = vec![0.0; m];
                let mut acc: f64 = (0..3).map(|ch| g[ch] * tr[m] * c.background[ch]).sum();
                for k in (0..m).rev() {
                    behind[k] = acc;
                    let w = tr[k] - tr[k + 1];
                    acc += (0..3).map(|ch| g[ch] * w * col[k][ch]).sum::<f64>();
                }
                for k in 0..m {
                    let w = tr[k] - tr[k + 1];
                    let gc: f64 = (0..3).map(|ch| g[ch] * col[k][ch]).sum();
                    let ds = delta * (tr[k + 1] * gc - behind[k]);
                    for corner in &corners[k] {
                        d_sigma[corner.voxel] += corner.weight * ds;
                        for ch in 0..3 {
                            d_color[corner.voxel * 3 + ch] += corner.color_weight * w * g[ch];
                        }
                    }
                }
            }
        }
        let mut grad = Vec::with_capacity(theta.values.len());
        for (v, &a) in d_sigma.iter().zip(&theta.values[..n3]) {
            grad.push(v * c.density_scale * sigmoid(a));
        }
        for (v, &raw) in d_color.iter().zip(&theta.values[n3..]) {
            let s = sigmoid(raw);
            grad.push(v * s * (1.0 - s));
        }
        Ok(grad)
    }

    fn depth(&self, theta: &SceneParameters, pose: &CameraPose) -> Result<Option<Tensor>> {
        self.prepare(theta, pose)?;
        let c = &self.config;
        let (sigma, color) = self.activated(theta);
        let delta = self.step();
        let far = 2.0 * NEAR;
        let mut out = Vec::with_capacity(c.image * c.image);
        let mut corners = Vec::new();
        for i in 0..c.image {
            for j in 0..c.image {
                self.ray_corners(pose, i, j, &mut corners);
                let (s, _) = Self::samples(&corners, &sigma, &color);
                let tr = Self::transmittance(&s, delta);
                let mut d = tr[s.len()] * far;
                for k in 0..s.len() {
                    d += (tr[k] - tr[k + 1]) * (k as f64 + 0.5) * delta;
                }
                out.push(d);
            }
        }
        Ok(Some(from_vec(&[c.image, c.image], out)?))
    }
}

#[cfg(test)]
mod tests {
    use super::super::CanonicalView;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> VoxelRenderer {
        VoxelRenderer::new(VoxelConfig {
            grid: 6,
            image: 8,
            samples_per_ray: 16,
            ..VoxelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn empty_grid_renders_background() {
        let r = small();
        let layout = r.layout();
        let mut values = vec![-60.0; layout.total()];
        for v in &mut values[216..] {
            *v = 0.3;
        }
        let theta = SceneParameters::new(values, layout).unwrap();
        let img = r.render(&theta, &CameraPose::canonical(CanonicalView::Front, 15.0)).unwrap();
        assert!(img.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn opaque_block_shows_its_color() {
        let r = VoxelRenderer::new(VoxelConfig {
            extent: 1.6,
            ..small().config
        })
        .unwrap();
        let layout = r.layout();
        let mut values = vec![20.0; 216];
        values.extend(std::iter::repeat_n([-30.0, 30.0, -30.0], 216).flatten());
        let theta = SceneParameters::new(values, layout).unwrap();
        let img = r.render(&theta, &CameraPose::canonical(CanonicalView::Front, 0.0)).unwrap();
        // Center pixels hit the cube, corners of the view plane miss it.
        assert!((img[[4, 4, 1]] - 1.0).abs() < 1e-6 && img[[4, 4, 0]] < 1e-6);
        assert!((img[[0, 0, 0]] - 1.0).abs() < 1e-9);
        let depth = r.depth(&theta, &CameraPose::canonical(CanonicalView::Front, 0.0)).unwrap().unwrap();
        assert!(depth[[4, 4]] < depth[[0, 0]]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let r = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut theta = r.init(&mut rng, 1.0);
        for v in &mut theta.values[..216] {
            *v += 2.5;
        }
        let pose = CameraPose::new(37.0, 15.0).unwrap();
        let g = randn(&r.image_shape(), &mut rng);
        let analytic = r.backward(&theta, &pose, &g).unwrap();
        let objective = |th: &SceneParameters| -> f64 {
            let img = r.render(th, &pose).unwrap();
            img.iter().zip(g.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let mut checked = 0;
        while checked < 5 {
            let idx = rng.random_range(0..theta.values.len());
            if analytic[idx].abs() < 1e-6 {
                continue;
            }
            let mut plus = theta.clone();
            plus.values[idx] += h;
            let mut minus = theta.clone();
            minus.values[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs());
            assert!(rel < 1e-4, "param {idx}: fd {fd} analytic {}", analytic[idx]);
            checked += 1;
        }
    }

    #[test]
    fn views_differ_and_limits_enforced() {
        let r = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut theta = r.init(&mut rng, 2.0);
        for v in &mut theta.values[..216] {
            *v += 3.0;
        }
        let a = r.render(&theta, &CameraPose::canonical(CanonicalView::Front, 15.0)).unwrap();
        let b = r.render(&theta, &CameraPose::canonical(CanonicalView::Right, 15.0)).unwrap();
        assert!(crate::tensor::max_abs_diff(&a, &b) > 1e-3);
        assert!(r.render(&theta, &CameraPose::new(0.0, 89.5).unwrap()).is_err());
        assert!(VoxelRenderer::new(VoxelConfig { grid: 33, ..VoxelConfig::default() }).is_err());
        assert!(VoxelRenderer::new(VoxelConfig { image: 65, ..VoxelConfig::default() }).is_err());
    }
}
