//! Semantic-geometry calibration: reward, semantic, depth and normal losses
//! over a four-view grid, with gradients with respect to the rendered views.

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::render::{CameraPose, CanonicalView};
use crate::tensor::{from_vec, randn, zeros, Tensor};

/// Four views arranged `[[front, right], [left, back]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGrid {
    pub views: Vec<Tensor>,
    pub poses: Vec<CameraPose>,
}

impl ViewGrid {
    pub fn new(views: Vec<Tensor>, poses: Vec<CameraPose>) -> Result<Self> {
        if views.len() != 4 || poses.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "a view grid needs exactly 4 views and poses, got {} and {}",
                views.len(),
                poses.len()
            )));
        }
        for (pose, expected) in poses.iter().zip(CanonicalView::GRID_ORDER) {
            if pose.tag != Some(expected) {
                return Err(Error::InvalidArgument(format!(
                    "view grid order is front, right, left, back; found {:?} where {expected} belongs",
                    pose.tag
                )));
            }
        }
        check_views("view grid", &views)?;
        Ok(Self { views, poses })
    }

    pub fn view_shape(&self) -> &[usize] {
        self.views[0].shape()
    }

    /// The 2H × 2W × C composite image.
    pub fn composite(&self) -> Tensor {
        composite(&self.views)
    }
}

fn check_views(context: &str, views: &[Tensor]) -> Result<()> {
    let shape = views[0].shape();
    if shape.len() != 3 {
        return Err(Error::shape(context, &[0, 0, 3], shape));
    }
    for v in views {
        if v.shape() != shape {
            return Err(Error::shape(context, shape, v.shape()));
        }
    }
    Ok(())
}

pub fn composite(views: &[Tensor]) -> Tensor {
    let sh = views[0].shape();
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    let mut out = zeros(&[2 * h, 2 * w, c]);
    for (k, v) in views.iter().enumerate() {
        let (r, col) = (k / 2, k % 2);
        out.slice_mut(s![r * h..(r + 1) * h, col * w..(col + 1) * w, ..]).assign(v);
    }
    out
}

/// Inverse of [`composite`].
pub fn split_composite(grid: &Tensor) -> Vec<Tensor> {
    let sh = grid.shape();
    let (h, w) = (sh[0] / 2, sh[1] / 2);
    (0..4)
        .map(|k| {
            let (r, col) = (k / 2, k % 2);
            grid.slice(s![r * h..(r + 1) * h, col * w..(col + 1) * w, ..]).to_owned().into_dyn()
        })
        .collect()
}

/// Reference images M aligned with the canonical views.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewReference {
    pub views: Vec<Tensor>,
    pub provenance: String,
}

impl MultiViewReference {
    pub fn new(views: Vec<Tensor>, provenance: impl Into<String>) -> Result<Self> {
        if views.len() != 4 {
            return Err(Error::InvalidArgument(format!("reference needs 4 views, got {}", views.len())));
        }
        check_views("multi-view reference", &views)?;
        Ok(Self {
            views,
            provenance: provenance.into(),
        })
    }

    fn check_against(&self, grid: &ViewGrid) -> Result<()> {
        if self.views[0].shape() != grid.view_shape() {
            return Err(Error::shape("reference vs grid", grid.view_shape(), self.views[0].shape()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SGCWeights {
    pub lambda_geo: f64,
    pub lambda_sem: f64,
    pub lambda_ir: f64,
}

impl Default for SGCWeights {
    fn default() -> Self {
        Self {
            lambda_geo: 1.0,
            lambda_sem: 4.0,
            lambda_ir: 2.5,
        }
    }
}

impl SGCWeights {
    pub fn zero() -> Self {
        Self {
            lambda_geo: 0.0,
            lambda_sem: 0.0,
            lambda_ir: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_geo", self.lambda_geo),
            ("lambda_sem", self.lambda_sem),
            ("lambda_ir", self.lambda_ir),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("sgc.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A differentiable image-to-tensor map (feature extractor, depth or normal estimator).
pub trait ImageMap: Send + Sync {
    fn id(&self) -> &str;

    fn apply(&self, image: &Tensor) -> Result<Tensor>;

    /// Vector-Jacobian product `Jᵀ · grad_out` at `image`.
    fn vjp(&self, image: &Tensor, grad_out: &Tensor) -> Result<Tensor>;
}

/// Differentiable scorer of (image, prompt) pairs.
pub trait RewardModel: Send + Sync {
    fn id(&self) -> &str;

    fn score(&self, image: &Tensor, prompt: &str) -> Result<f64>;

    /// ∂score/∂image.
    fn score_grad(&self, image: &Tensor, prompt: &str) -> Result<Tensor>;
}

fn rgb_shape(context: &str, image: &Tensor) -> Result<(usize, usize)> {
    let sh = image.shape();
    if sh.len() != 3 || sh[2] != 3 {
        return Err(Error::shape(context, &[0, 0, 3], sh));
    }
    Ok((sh[0], sh[1]))
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// ϖ: depth read off as pixel luminance, shape H × W.
#[derive(Debug, Clone, Copy, Default)]
pub struct LuminanceDepth;

impl ImageMap for LuminanceDepth {
    fn id(&self) -> &str {
        "luminance-depth"
    }

    fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w) = rgb_shape("luminance depth", image)?;
        let mut out = zeros(&[h, w]);
        for i in 0..h {
            for j in 0..w {
                out[[i, j]] = (0..3).map(|c| LUMA[c] * image[[i, j, c]]).sum();
            }
        }
        Ok(out)
    }

    fn vjp(&self, image: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (h, w) = rgb_shape("luminance depth", image)?;
        if grad_out.shape() != [h, w] {
            return Err(Error::shape("luminance depth gradient", &[h, w], grad_out.shape()));
        }
        let mut out = zeros(&[h, w, 3]);
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    out[[i, j, c]] = LUMA[c] * grad_out[[i, j]];
                }
            }
        }
        Ok(out)
    }
}

/// nor: tangential pseudo-normals `(-∂L/∂x, -∂L/∂y)` of the luminance,
/// central differences with replicated borders, shape H × W × 2.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientNormals;

impl GradientNormals {
    fn neighbours(i: usize, n: usize) -> (usize, usize, f64) {
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(n - 1);
        let span = (hi - lo) as f64;
        (lo, hi, if span > 0.0 { 1.0 / span } else { 0.0 })
    }
}

impl ImageMap for GradientNormals {
    fn id(&self) -> &str {
        "gradient-normals"
    }

    fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let lum = LuminanceDepth.apply(image)?;
        let (h, w) = (lum.shape()[0], lum.shape()[1]);
        let mut out = zeros(&[h, w, 2]);
        for i in 0..h {
            let (up, down, sy) = Self::neighbours(i, h);
            for j in 0..w {
                let (left, right, sx) = Self::neighbours(j, w);
                out[[i, j, 0]] = -(lum[[i, right]] - lum[[i, left]]) * sx;
                out[[i, j, 1]] = -(lum[[down, j]] - lum[[up, j]]) * sy;
            }
        }
        Ok(out)
    }

    fn vjp(&self, image: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (h, w) = rgb_shape("gradient normals", image)?;
        if grad_out.shape() != [h, w, 2] {
            return Err(Error::shape("gradient normals gradient", &[h, w, 2], grad_out.shape()));
        }
        let mut d_lum = zeros(&[h, w]);
        for i in 0..h {
            let (up, down, sy) = Self::neighbours(i, h);
            for j in 0..w {
                let (left, right, sx) = Self::neighbours(j, w);
                let gx = grad_out[[i, j, 0]] * sx;
                d_lum[[i, right]] -= gx;
                d_lum[[i, left]] += gx;
                let gy = grad_out[[i, j, 1]] * sy;
                d_lum[[down, j]] -= gy;
                d_lum[[up, j]] += gy;
            }
        }
        LuminanceDepth.vjp(image, &d_lum)
    }
}

/// E: average-pool by `pool`, then a fixed seeded Gaussian projection.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomProjectionFeatures {
    pool: usize,
    input_shape: Vec<usize>,
    weights: Array2<f64>,
}

impl RandomProjectionFeatures {
    pub fn new(input_shape: &[usize], pool: usize, features: usize, seed: u64) -> Result<Self> {
        if input_shape.len() != 3 || pool == 0 || !input_shape[0].is_multiple_of(pool) || !input_shape[1].is_multiple_of(pool) {
            return Err(Error::InvalidArgument(format!(
                "pool {pool} must divide the spatial dims of {input_shape:?}"
            )));
        }
        let pooled = (input_shape[0] / pool) * (input_shape[1] / pool) * input_shape[2];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (pooled as f64).sqrt();
        let w = randn(&[features, pooled], &mut rng) * scale;
        let weights = w.into_dimensionality().expect("rank 2");
        Ok(Self {
            pool,
            input_shape: input_shape.to_vec(),
            weights,
        })
    }

    fn pooled_index(&self, i: usize, j: usize, c: usize) -> usize {
        let pw = self.input_shape[1] / self.pool;
        ((i / self.pool) * pw + j / self.pool) * self.input_shape[2] + c
    }

    fn check(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::shape("semantic features", &self.input_shape, image.shape()));
        }
        Ok(())
    }
}

impl ImageMap for RandomProjectionFeatures {
    fn id(&self) -> &str {
        "random-projection"
    }

    fn apply(&self, image: &Tensor) -> Result<Tensor> {
        self.check(image)?;
        let mut pooled = ndarray::Array1::<f64>::zeros(self.weights.ncols());
        let area = (self.pool * self.pool) as f64;
        for ((i, j, c), v) in image.view().into_dimensionality::<ndarray::Ix3>().expect("rank 3").indexed_iter() {
            pooled[self.pooled_index(i, j, c)] += v / area;
        }
        Ok(self.weights.dot(&pooled).into_dyn())
    }

    fn vjp(&self, image: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        self.check(image)?;
        if grad_out.shape() != [self.weights.nrows()] {
            return Err(Error::shape("semantic feature gradient", &[self.weights.nrows()], grad_out.shape()));
        }
        let g = grad_out.view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
        let d_pooled = self.weights.t().dot(&g);
        let area = (self.pool * self.pool) as f64;
        let mut out = zeros(&self.input_shape);
        for ((i, j, c), v) in out
            .view_mut()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("rank 3")
            .indexed_iter_mut()
        {
            *v = d_pooled[self.pooled_index(i, j, c)] / area;
        }
        Ok(out)
    }
}

/// Identity feature map.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMap;

impl ImageMap for IdentityMap {
    fn id(&self) -> &str {
        "identity"
    }

    fn apply(&self, image: &Tensor) -> Result<Tensor> {
        Ok(image.clone())
    }

    fn vjp(&self, _image: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        Ok(grad_out.clone())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic offset in [-0.05, 0.05) derived from the prompt.
pub fn prompt_offset(prompt: &str) -> f64 {
    ((fnv1a(prompt) % 1000) as f64 / 1000.0 - 0.5) * 0.1
}

/// `r = -scale · mean((x - target)²) + prompt_offset(prompt)`, using the
/// first target whose shape matches the image.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReward {
    pub targets: Vec<Tensor>,
    pub scale: f64,
}

impl DistanceReward {
    fn target_for(&self, image: &Tensor) -> Result<&Tensor> {
        self.targets
            .iter()
            .find(|t| t.shape() == image.shape())
            .ok_or_else(|| Error::shape("distance reward target", &[], image.shape()))
    }
}

impl RewardModel for DistanceReward {
    fn id(&self) -> &str {
        "distance"
    }

    fn score(&self, image: &Tensor, prompt: &str) -> Result<f64> {
        let t = self.target_for(image)?;
        let msd = (image - t).mapv(|d| d * d).mean().unwrap_or(0.0);
        Ok(-self.scale * msd + prompt_offset(prompt))
    }

    fn score_grad(&self, image: &Tensor, _prompt: &str) -> Result<Tensor> {
        let t = self.target_for(image)?;
        let n = image.len() as f64;
        Ok((image - t) * (-2.0 * self.scale / n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantReward(pub f64);

impl RewardModel for ConstantReward {
    fn id(&self) -> &str {
        "constant"
    }

    fn score(&self, _image: &Tensor, _prompt: &str) -> Result<f64> {
        Ok(self.0)
    }

    fn score_grad(&self, image: &Tensor, _prompt: &str) -> Result<Tensor> {
        Ok(zeros(image.shape()))
    }
}

/// to_loss(r) = softplus(-r).
pub fn reward_to_loss(r: f64) -> f64 {
    let x = -r;
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// d to_loss / dr.
pub fn reward_to_loss_grad(r: f64) -> f64 {
    -1.0 / (1.0 + r.exp())
}

/// A component value plus its gradient with respect to each grid view.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLoss {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

fn mean_over_views<F>(grid: &ViewGrid, mut per_view: F) -> Result<ComponentLoss>
where
    F: FnMut(usize, &Tensor) -> Result<(f64, Tensor)>,
{
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(4);
    for (k, view) in grid.views.iter().enumerate() {
        let (v, g) = per_view(k, view)?;
        value += v / 4.0;
        grads.push(g / 4.0);
    }
    Ok(ComponentLoss { value, grads })
}

fn view_name(grid: &ViewGrid, k: usize) -> String {
    grid.poses[k].tag.map(|t| t.to_string()).unwrap_or_else(|| k.to_string())
}

/// Mean over inputs of `to_loss(reward)`; inputs are the composite or the four views.
pub fn image_reward_loss(grid: &ViewGrid, prompt: &str, reward: &dyn RewardModel, on_grid: bool) -> Result<ComponentLoss> {
    let term = |image: &Tensor| -> Result<(f64, Tensor)> {
        let r = reward.score(image, prompt)?;
        let g = reward.score_grad(image, prompt)? * reward_to_loss_grad(r);
        Ok((reward_to_loss(r), g))
    };
    if on_grid {
        let (value, g) = term(&grid.composite())?;
        Ok(ComponentLoss {
            value,
            grads: split_composite(&g),
        })
    } else {
        mean_over_views(grid, |_, v| term(v))
    }
}

/// Mean over views of `‖E(M) − E(S)‖²`.
pub fn semantic_loss(grid: &ViewGrid, reference: &MultiViewReference, extractor: &dyn ImageMap) -> Result<ComponentLoss> {
    reference.check_against(grid)?;
    mean_over_views(grid, |k, view| {
        let fs = extractor.apply(view)?;
        let fm = extractor.apply(&reference.views[k])?;
        if fs.shape() != fm.shape() {
            return Err(Error::shape("semantic features", fm.shape(), fs.shape()));
        }
        let diff = &fs - &fm;
        let value = diff.mapv(|d| d * d).sum();
        Ok((value, extractor.vjp(view, &(diff * 2.0))?))
    })
}

/// Population variance below which a depth map counts as constant.
pub const DEPTH_VARIANCE_EPS: f64 = 1e-8;

/// Pearson correlation of two maps and its gradient with respect to `a`.
pub fn pearson_with_grad(a: &Tensor, b: &Tensor) -> (f64, Tensor) {
    let ac = a - a.mean().unwrap_or(0.0);
    let bc = b - b.mean().unwrap_or(0.0);
    let na = ac.mapv(|v| v * v).sum().sqrt();
    let nb = bc.mapv(|v| v * v).sum().sqrt();
    let rho = (&ac * &bc).sum() / (na * nb);
    let grad = &bc / (na * nb) - &ac * (rho / (na * na));
    (rho, grad)
}

fn check_depth_variance(map: &Tensor, grid: &ViewGrid, k: usize, which: &str) -> Result<()> {
    let var = map.var(0.0);
    if !(var >= DEPTH_VARIANCE_EPS) {
        return Err(Error::Degenerate {
            component: "depth",
            view: view_name(grid, k),
            reason: format!("{which} depth variance {var:e} below {DEPTH_VARIANCE_EPS:e}"),
        });
    }
    Ok(())
}

/// Mean over views of the negative Pearson correlation of ϖ(S) and ϖ(M).
pub fn depth_loss(grid: &ViewGrid, reference: &MultiViewReference, depth: &dyn ImageMap) -> Result<ComponentLoss> {
    reference.check_against(grid)?;
    mean_over_views(grid, |k, view| {
        let ds = depth.apply(view)?;
        let dm = depth.apply(&reference.views[k])?;
        if ds.shape() != dm.shape() {
            return Err(Error::shape("depth maps", dm.shape(), ds.shape()));
        }
        check_depth_variance(&ds, grid, k, "rendered")?;
        check_depth_variance(&dm, grid, k, "reference")?;
        let (rho, g) = pearson_with_grad(&ds, &dm);
        Ok((-rho, depth.vjp(view, &(-g))?))
    })
}

/// Mean over views of the negative cosine between flattened nor(S) and nor(M).
pub fn normal_loss(grid: &ViewGrid, reference: &MultiViewReference, normals: &dyn ImageMap) -> Result<ComponentLoss> {
    reference.check_against(grid)?;
    mean_over_views(grid, |k, view| {
        let ns = normals.apply(view)?;
        let nm = normals.apply(&reference.views[k])?;
        if ns.shape() != nm.shape() {
            return Err(Error::shape("normal fields", nm.shape(), ns.shape()));
        }
        let a = ns.mapv(|v| v * v).sum().sqrt();
        let b = nm.mapv(|v| v * v).sum().sqrt();
        if a == 0.0 || b == 0.0 {
            return Err(Error::Degenerate {
                component: "normal",
                view: view_name(grid, k),
                reason: "zero-norm normal field".into(),
            });
        }
        let cos = (&ns * &nm).sum() / (a * b);
        let d_cos = &nm / (a * b) - &ns * (cos / (a * a));
        Ok((-cos, normals.vjp(view, &(-d_cos))?))
    })
}

/// Extractors used by [`sgc_loss`].
pub struct ExtractorBundle {
    pub semantic: Box<dyn ImageMap>,
    pub depth: Box<dyn ImageMap>,
    pub normal: Box<dyn ImageMap>,
    pub reward: Box<dyn RewardModel>,
    /// Score the 2 × 2 composite (default) rather than each view.
    pub reward_on_grid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SgcBreakdown {
    pub depth: f64,
    pub normal: f64,
    pub semantic: f64,
    pub ir: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgcResult {
    pub breakdown: SgcBreakdown,
    /// ∂L_SGC/∂view for each grid view.
    pub grads: Vec<Tensor>,
}

fn named(component: &'static str, r: Result<ComponentLoss>) -> Result<ComponentLoss> {
    r.map_err(|e| match e {
        e @ Error::Degenerate { .. } => e,
        e => Error::Component {
            component,
            source: Box::new(e),
        },
    })
}

/// `λ1 (L_depth + L_normal) + λ2 L_semantic + λi L_IR`. Components with a
/// zero weight are skipped and report 0.
pub fn sgc_loss(
    grid: &ViewGrid,
    reference: &MultiViewReference,
    prompt: &str,
    weights: &SGCWeights,
    extractors: &ExtractorBundle,
) -> Result<SgcResult> {
    weights.validate()?;
    let mut breakdown = SgcBreakdown::default();
    let mut grads: Vec<Tensor> = grid.views.iter().map(|v| zeros(v.shape())).collect();
    let mut add = |c: &ComponentLoss, w: f64| {
        for (g, cg) in grads.iter_mut().zip(&c.grads) {
            g.scaled_add(w, cg);
        }
    };
    if weights.lambda_geo != 0.0 {
        let d = named("depth", depth_loss(grid, reference, extractors.depth.as_ref()))?;
        let n = named("normal", normal_loss(grid, reference, extractors.normal.as_ref()))?;
        add(&d, weights.lambda_geo);
        add(&n, weights.lambda_geo);
        breakdown.depth = d.value;
        breakdown.normal = n.value;
    }
    if weights.lambda_sem != 0.0 {
        let c = named("semantic", semantic_loss(grid, reference, extractors.semantic.as_ref()))?;
        add(&c, weights.lambda_sem);
        breakdown.semantic = c.value;
    }
    if weights.lambda_ir != 0.0 {
        let c = named(
            "image_reward",
            image_reward_loss(grid, prompt, extractors.reward.as_ref(), extractors.reward_on_grid),
        )?;
        add(&c, weights.lambda_ir);
        breakdown.ir = c.value;
    }
    breakdown.total = weights.lambda_geo * (breakdown.depth + breakdown.normal)
        + weights.lambda_sem * breakdown.semantic
        + weights.lambda_ir * breakdown.ir;
    Ok(SgcResult { breakdown, grads })
}

/// Which implementation fills each extractor slot (`toy` or `external`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorNames {
    pub semantic: String,
    pub depth: String,
    pub normal: String,
    pub reward: String,
}

impl Default for ExtractorNames {
    fn default() -> Self {
        let toy = || "toy".to_string();
        Self {
            semantic: toy(),
            depth: toy(),
            normal: toy(),
            reward: toy(),
        }
    }
}

/// What toy extractors need to be built.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorContext {
    pub view_shape: Vec<usize>,
    pub seed: u64,
    /// Targets for the toy reward (composite and/or single views).
    pub reward_targets: Vec<Tensor>,
    pub reward_on_grid: bool,
}

pub const TOY_FEATURES: usize = 32;

fn toy_pool(shape: &[usize]) -> usize {
    [4, 2].into_iter().find(|p| shape[0].is_multiple_of(*p) && shape[1].is_multiple_of(*p)).unwrap_or(1)
}

fn external_unavailable(slot: &str) -> Error {
    Error::Unavailable(format!(
        "no external {slot} extractor is configured; external extractors are served by an adapter process"
    ))
}

pub fn image_map_registry(slot: &'static str) -> Registry<ExtractorContext, dyn ImageMap> {
    let mut r = Registry::new("extractor");
    match slot {
        "semantic" => r.register("toy", |c: &ExtractorContext| {
            Ok(Box::new(RandomProjectionFeatures::new(
                &c.view_shape,
                toy_pool(&c.view_shape),
                TOY_FEATURES,
                c.seed,
            )?) as Box<dyn ImageMap>)
        }),
        "depth" => r.register("toy", |_: &ExtractorContext| Ok(Box::new(LuminanceDepth) as Box<dyn ImageMap>)),
        _ => r.register("toy", |_: &ExtractorContext| Ok(Box::new(GradientNormals) as Box<dyn ImageMap>)),
    }
    r.register("external", move |_: &ExtractorContext| Err(external_unavailable(slot)));
    r
}

pub fn reward_registry() -> Registry<ExtractorContext, dyn RewardModel> {
    let mut r = Registry::new("reward model");
    r.register("toy", |c: &ExtractorContext| {
        Ok(Box::new(DistanceReward {
            targets: c.reward_targets.clone(),
            scale: 1.0,
        }) as Box<dyn RewardModel>)
    });
    r.register("external", |_: &ExtractorContext| Err(external_unavailable("reward")));
    r
}

pub fn build_extractors(names: &ExtractorNames, ctx: &ExtractorContext) -> Result<ExtractorBundle> {
    Ok(ExtractorBundle {
        semantic: image_map_registry("semantic").build(&names.semantic, ctx)?,
        depth: image_map_registry("depth").build(&names.depth, ctx)?,
        normal: image_map_registry("normal").build(&names.normal, ctx)?,
        reward: reward_registry().build(&names.reward, ctx)?,
        reward_on_grid: ctx.reward_on_grid,
    })
}

/// Canonical-pose grid from four views in grid order.
pub fn canonical_grid(views: Vec<Tensor>, elevation: f64) -> Result<ViewGrid> {
    let poses = CanonicalView::GRID_ORDER
        .iter()
        .map(|v| CameraPose::canonical(*v, elevation))
        .collect();
    ViewGrid::new(views, poses)
}

/// Flattened copy, handy for reshaping gradients.
pub fn flat(t: &Tensor) -> Vec<f64> {
    t.iter().copied().collect()
}

/// Smooth random image for tests and fixtures: a sum of low-frequency sinusoids.
pub fn smooth_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs = randn(&[3, 4], &mut rng);
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 / h as f64, j as f64 / w as f64);
            for c in 0..3 {
                let k = coeffs.index_axis(Axis(0), c);
                let v = 0.5
                    + 0.2 * (k[0] * (3.0 * x + k[1]).sin() + k[2] * (2.0 * y + k[3]).cos())
                    + 0.05 * (x - y);
                data.push(v);
            }
        }
    }
    from_vec(&[h, w, 3], data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::finite_difference_grad;

    fn grid_from(views: Vec<Tensor>) -> ViewGrid {
        canonical_grid(views, 15.0).unwrap()
    }

    fn random_pair(seed: u64) -> (ViewGrid, MultiViewReference) {
        let s: Vec<Tensor> = (0..4).map(|k| smooth_image(8, 8, seed + k)).collect();
        let m: Vec<Tensor> = (0..4).map(|k| smooth_image(8, 8, seed + 100 + k)).collect();
        (grid_from(s), MultiViewReference::new(m, "fixture").unwrap())
    }

    /// Max relative error between a component gradient and central differences on view 1.
    fn fd_check<F>(grid: &ViewGrid, analytic: &ComponentLoss, f: F) -> f64
    where
        F: Fn(&ViewGrid) -> f64,
    {
        let view = 1;
        let fd = finite_difference_grad(
            |x: &Tensor| {
                let mut g = grid.clone();
                g.views[view] = x.clone();
                Ok(f(&g))
            },
            &grid.views[view],
            1e-5,
        )
        .unwrap();
        let a = &analytic.grads[view];
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(fd.iter()).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
    }

    #[test]
    fn composite_layout_and_split() {
        let views: Vec<Tensor> = (0..4).map(|k| Tensor::from_elem(vec![2, 3, 3], k as f64)).collect();
        let g = grid_from(views.clone());
        let c = g.composite();
        assert_eq!(c.shape(), &[4, 6, 3]);
        assert_eq!(c[[0, 0, 0]], 0.0);
        assert_eq!(c[[0, 5, 0]], 1.0);
        assert_eq!(c[[3, 0, 0]], 2.0);
        assert_eq!(c[[3, 5, 0]], 3.0);
        assert_eq!(split_composite(&c), views);
    }

    #[test]
    fn grid_rejects_wrong_order() {
        let views: Vec<Tensor> = (0..4).map(|_| zeros(&[2, 2, 3])).collect();
        let mut poses: Vec<CameraPose> = CanonicalView::GRID_ORDER
            .iter()
            .map(|v| CameraPose::canonical(*v, 15.0))
            .collect();
        poses.swap(2, 3);
        assert!(ViewGrid::new(views.clone(), poses).is_err());
        assert!(ViewGrid::new(views[..3].to_vec(), vec![]).is_err());
    }

    #[test]
    fn identity_values() {
        let (g, _) = random_pair(1);
        let m = MultiViewReference::new(g.views.clone(), "self").unwrap();
        assert!((depth_loss(&g, &m, &LuminanceDepth).unwrap().value + 1.0).abs() < 1e-12);
        assert!((normal_loss(&g, &m, &GradientNormals).unwrap().value + 1.0).abs() < 1e-12);
        assert_eq!(semantic_loss(&g, &m, &IdentityMap).unwrap().value, 0.0);
        let neg = MultiViewReference::new(g.views.iter().map(|v| v * -1.0).collect(), "neg").unwrap();
        assert!((depth_loss(&g, &neg, &LuminanceDepth).unwrap().value - 1.0).abs() < 1e-12);
        assert!((normal_loss(&g, &neg, &GradientNormals).unwrap().value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn semantic_identity_extractor_counts_elements() {
        let (g, _) = random_pair(2);
        let m = MultiViewReference::new(g.views.iter().map(|v| v + 1.0).collect(), "shift").unwrap();
        let l = semantic_loss(&g, &m, &IdentityMap).unwrap();
        assert!((l.value - (8 * 8 * 3) as f64).abs() < 1e-9);
    }

    #[test]
    fn depth_affine_invariance() {
        let (g, m) = random_pair(3);
        let base = depth_loss(&g, &m, &IdentityDepth).unwrap().value;
        let m2 = MultiViewReference::new(m.views.iter().map(|v| v * 3.7 + 0.4).collect(), "affine").unwrap();
        let g2 = grid_from(g.views.iter().map(|v| v * 0.2 - 5.0).collect());
        assert!((depth_loss(&g, &m2, &IdentityDepth).unwrap().value - base).abs() < 1e-10);
        assert!((depth_loss(&g2, &m, &IdentityDepth).unwrap().value - base).abs() < 1e-10);
    }

    /// Treats the red channel as the depth map, so affine maps of the image act on depth.
    struct IdentityDepth;

    impl ImageMap for IdentityDepth {
        fn id(&self) -> &str {
            "red"
        }
        fn apply(&self, image: &Tensor) -> Result<Tensor> {
            Ok(image.index_axis(Axis(2), 0).to_owned())
        }
        fn vjp(&self, image: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
            let mut out = zeros(image.shape());
            out.index_axis_mut(Axis(2), 0).assign(grad_out);
            Ok(out)
        }
    }

    #[test]
    fn constant_depth_is_degenerate_and_named() {
        let (mut g, m) = random_pair(4);
        g.views[2] = Tensor::from_elem(vec![8, 8, 3], 0.5);
        match depth_loss(&g, &m, &LuminanceDepth) {
            Err(Error::Degenerate { view, .. }) => assert_eq!(view, "left"),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn zero_normals_rejected() {
        let (mut g, m) = random_pair(5);
        g.views[0] = Tensor::from_elem(vec![8, 8, 3], 0.5);
        assert!(matches!(
            normal_loss(&g, &m, &GradientNormals),
            Err(Error::Degenerate { component: "normal", .. })
        ));
    }

    #[test]
    fn normal_scale_invariance() {
        let (g, m) = random_pair(6);
        let base = normal_loss(&g, &m, &GradientNormals).unwrap().value;
        let scaled = grid_from(g.views.iter().map(|v| v * 2.5).collect());
        assert!((normal_loss(&scaled, &m, &GradientNormals).unwrap().value - base).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (g, m) = random_pair(7);
        let feats = RandomProjectionFeatures::new(&[8, 8, 3], 2, 16, 9).unwrap();
        let target = composite(&m.views);
        let reward = DistanceReward {
            targets: vec![target],
            scale: 3.0,
        };
        let per_view = DistanceReward {
            targets: vec![m.views[1].clone()],
            scale: 3.0,
        };
        let checks: Vec<(&str, f64)> = vec![
            ("depth", {
                let a = depth_loss(&g, &m, &LuminanceDepth).unwrap();
                fd_check(&g, &a, |x| depth_loss(x, &m, &LuminanceDepth).unwrap().value)
            }),
            ("normal", {
                let a = normal_loss(&g, &m, &GradientNormals).unwrap();
                fd_check(&g, &a, |x| normal_loss(x, &m, &GradientNormals).unwrap().value)
            }),
            ("semantic", {
                let a = semantic_loss(&g, &m, &feats).unwrap();
                fd_check(&g, &a, |x| semantic_loss(x, &m, &feats).unwrap().value)
            }),
            ("reward", {
                let a = image_reward_loss(&g, "a red chair", &reward, true).unwrap();
                fd_check(&g, &a, |x| image_reward_loss(x, "a red chair", &reward, true).unwrap().value)
            }),
            ("reward per view", {
                let a = image_reward_loss(&g, "p", &per_view, false).unwrap();
                fd_check(&g, &a, |x| image_reward_loss(x, "p", &per_view, false).unwrap().value)
            }),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn reward_prefers_the_target() {
        let (g, m) = random_pair(8);
        let reward = DistanceReward {
            targets: vec![composite(&m.views)],
            scale: 1.0,
        };
        let matched = grid_from(m.views.clone());
        let at_target = image_reward_loss(&matched, "x", &reward, true).unwrap().value;
        assert!(at_target < image_reward_loss(&g, "x", &reward, true).unwrap().value);
        let c = image_reward_loss(&g, "x", &ConstantReward(0.7), true).unwrap();
        assert_eq!(c.value, reward_to_loss(0.7));
        assert_ne!(prompt_offset("a"), prompt_offset("b"));
    }

    #[test]
    fn sgc_combination() {
        let (g, m) = random_pair(9);
        let bundle = ExtractorBundle {
            semantic: Box::new(RandomProjectionFeatures::new(&[8, 8, 3], 2, 16, 1).unwrap()),
            depth: Box::new(LuminanceDepth),
            normal: Box::new(GradientNormals),
            reward: Box::new(ConstantReward(0.3)),
            reward_on_grid: true,
        };
        let zero = sgc_loss(&g, &m, "p", &SGCWeights::zero(), &bundle).unwrap();
        assert_eq!(zero.breakdown.total, 0.0);
        assert!(zero.grads.iter().all(|t| t.iter().all(|v| *v == 0.0)));

        let same = MultiViewReference::new(g.views.clone(), "self").unwrap();
        let w = SGCWeights::default();
        let r = sgc_loss(&g, &same, "p", &w, &bundle).unwrap();
        let expected = w.lambda_ir * reward_to_loss(0.3) - 2.0 * w.lambda_geo;
        assert!((r.breakdown.total - expected).abs() < 1e-12);

        let one = sgc_loss(&g, &m, "p", &w, &bundle).unwrap().breakdown;
        let doubled = sgc_loss(
            &g,
            &m,
            "p",
            &SGCWeights {
                lambda_sem: 2.0 * w.lambda_sem,
                ..w
            },
            &bundle,
        )
        .unwrap()
        .breakdown;
        assert!((doubled.total - one.total - w.lambda_sem * one.semantic).abs() < 1e-9);
    }

    #[test]
    fn component_errors_carry_names() {
        let (g, m) = random_pair(10);
        let bundle = ExtractorBundle {
            semantic: Box::new(RandomProjectionFeatures::new(&[4, 4, 3], 2, 16, 1).unwrap()),
            depth: Box::new(LuminanceDepth),
            normal: Box::new(GradientNormals),
            reward: Box::new(ConstantReward(0.0)),
            reward_on_grid: true,
        };
        let err = sgc_loss(&g, &m, "p", &SGCWeights::default(), &bundle).unwrap_err();
        assert!(matches!(err, Error::Component { component: "semantic", .. }));
    }

    #[test]
    fn registry_builds_toys_and_rejects_external() {
        let ctx = ExtractorContext {
            view_shape: vec![8, 8, 3],
            seed: 0,
            reward_targets: vec![],
            reward_on_grid: true,
        };
        assert!(build_extractors(&ExtractorNames::default(), &ctx).is_ok());
        let ext = ExtractorNames {
            depth: "external".into(),
            ..ExtractorNames::default()
        };
        assert!(matches!(build_extractors(&ext, &ctx), Err(Error::Unavailable(_))));
    }
}
