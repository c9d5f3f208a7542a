use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    abort_run, finish_run, is_snapshot_step, prepare_out_dir, ExperimentConfig, MetricsSink, RunKind, RunOptions,
    RunRecord, Snapshot,
};
use crate::backends::Denoiser;
use crate::error::{Error, Result};
use crate::losses::{build_loss, LossContext};
use crate::optim::Adam;
use crate::render::{render_grid, renderer_registry, CameraPose, CanonicalView, RendererSpec, SceneParameters};
use crate::sgc::{build_extractors, composite, pearson_with_grad, sgc_loss, ExtractorContext, ImageMap, LuminanceDepth, MultiViewReference, ViewGrid};

/// What a toy 3D run is calibrated against.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFixture {
    /// Prompt label of the scene.
    pub label: usize,
    pub reference: MultiViewReference,
    /// Image used as the visual prompt.
    pub visual_image: Option<crate::Tensor>,
    /// Ground-truth scene, when known, for final depth correlations.
    pub target: Option<SceneParameters>,
}

const COLUMNS: [&str; 13] = [
    "step",
    "t",
    "t_min",
    "t_max",
    "vpcsm_grad_norm",
    "sgc_grad_norm",
    "cfg_term",
    "pag_term",
    "L_depth",
    "L_normal",
    "L_semantic",
    "L_IR",
    "L_SGC",
];

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Optimise a voxel scene with the distillation loss on randomly posed views
/// plus SGC on the canonical grid.
pub fn run_3d_toy(
    config: &ExperimentConfig,
    backend: &dyn Denoiser,
    fixture: &SceneFixture,
    opts: &RunOptions,
) -> Result<RunRecord> {
    config.validate()?;
    if config.renderer != "voxel" {
        return Err(Error::Config(format!(
            "toy 3D runs need the voxel renderer, got `{}`",
            config.renderer
        )));
    }
    let started = std::time::Instant::now();
    let renderer = renderer_registry().build(
        &config.renderer,
        &RendererSpec {
            voxel: config.scene.voxel.clone(),
            ..RendererSpec::default()
        },
    )?;
    let view_shape = renderer.image_shape();
    if fixture.reference.views[0].shape() != view_shape.as_slice() {
        return Err(Error::shape("reference views", &view_shape, fixture.reference.views[0].shape()));
    }
    let out_dir = opts.out_dir.as_deref();
    prepare_out_dir(out_dir, config)?;
    let loss = build_loss(&config.loss_config())?;
    let window = config.window()?;
    let conditions = config.conditioning.conditions(opts.visual_tokens.clone());
    let schedule = backend.schedule().clone();
    let weights = config.sgc.weights();
    let prompt = config.conditioning.reward_prompt();
    let extractors = build_extractors(
        &config.sgc.extractors,
        &ExtractorContext {
            view_shape: view_shape.clone(),
            seed: config.seed,
            reward_targets: vec![composite(&fixture.reference.views), fixture.reference.views[0].clone()],
            reward_on_grid: config.sgc.reward_on_grid,
        },
    )?;
    let elevation = config.scene.elevation;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = renderer.init(&mut rng, config.init.scale);
    let n = theta.values.len();
    let mut adam = Adam::with_lr(n, config.step_size);
    let mut metrics = MetricsSink::new(&COLUMNS, out_dir)?;
    let mut snapshots = Vec::new();

    for step in 0..config.iterations {
        let last_good = theta.clone();
        let outcome = (|| -> Result<()> {
            let (t_min, t_max) = window.window_at(step)?;
            let t = window.sample_t(step, &mut rng, &schedule)?;
            let poses = config.scene.poses_per_step;
            let mut g_dist = vec![0.0; n];
            let (mut cfg_term, mut pag_term) = (0.0, 0.0);
            for _ in 0..poses {
                let pose = CameraPose::new(rng.random_range(0.0..360.0), elevation)?;
                let image = renderer.render(&theta, &pose)?;
                let report = loss.gradient(LossContext {
                    x0: &image,
                    t,
                    conditions: &conditions,
                    backend,
                    rng: &mut rng,
                })?;
                let g = renderer.backward(&theta, &pose, &report.grad)?;
                for (acc, v) in g_dist.iter_mut().zip(&g) {
                    *acc += v / poses as f64;
                }
                cfg_term += report.term("cfg_term") / poses as f64;
                pag_term += report.term("pag_term") / poses as f64;
            }

            let (views, canonical) = render_grid(&theta, renderer.as_ref(), elevation)?;
            let grid = ViewGrid::new(views, canonical.clone())?;
            let sgc = sgc_loss(&grid, &fixture.reference, &prompt, &weights, &extractors)?;
            let mut g_sgc = vec![0.0; n];
            if sgc.grads.iter().any(|g| g.iter().any(|v| *v != 0.0)) {
                for (pose, g_view) in canonical.iter().zip(&sgc.grads) {
                    let g = renderer.backward(&theta, pose, g_view)?;
                    for (acc, v) in g_sgc.iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
            }
            let grad: Vec<f64> = g_dist.iter().zip(&g_sgc).map(|(a, b)| a + b).collect();
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::non_finite(format!("gradient at step {step}")));
            }
            let b = sgc.breakdown;
            metrics.push(vec![
                step as f64,
                t as f64,
                t_min,
                t_max,
                l2(&g_dist),
                l2(&g_sgc),
                cfg_term,
                pag_term,
                b.depth,
                b.normal,
                b.semantic,
                b.ir,
                b.total,
            ])?;
            if is_snapshot_step(step, config) {
                snapshots.push(Snapshot {
                    step,
                    images: CanonicalView::GRID_ORDER
                        .iter()
                        .zip(grid.views)
                        .map(|(v, img)| (v.name().to_string(), img))
                        .collect(),
                });
            }
            adam.step(&mut theta.values, &grad);
            if !theta.is_finite() {
                return Err(Error::non_finite(format!("parameters after step {step}")));
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            return Err(abort_run(e, step, renderer.id(), &last_good, out_dir));
        }
    }

    let mut summary = BTreeMap::new();
    if let Some(target) = &fixture.target {
        let mut worst = f64::INFINITY;
        for view in CanonicalView::GRID_ORDER {
            let pose = CameraPose::canonical(view, elevation);
            let (Some(a), Some(b)) = (renderer.depth(&theta, &pose)?, renderer.depth(target, &pose)?) else {
                break;
            };
            let rho = pearson_with_grad(&a, &b).0;
            worst = worst.min(rho);
            summary.insert(format!("depth_pearson_{}", view.name()), rho);
            let la = LuminanceDepth.apply(&renderer.render(&theta, &pose)?)?;
            let lb = LuminanceDepth.apply(&renderer.render(target, &pose)?)?;
            summary.insert(format!("luminance_pearson_{}", view.name()), pearson_with_grad(&la, &lb).0);
        }
        summary.insert("depth_pearson_min".to_string(), worst);
    }
    finish_run(
        RunKind::Toy3d,
        config,
        metrics.table,
        snapshots,
        theta,
        renderer.id(),
        started,
        out_dir,
        summary,
    )
}
