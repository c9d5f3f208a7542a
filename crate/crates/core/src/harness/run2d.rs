use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    abort_run, finish_run, is_snapshot_step, prepare_out_dir, ExperimentConfig, MetricsSink, RunKind, RunOptions,
    RunRecord, Snapshot,
};
use crate::backends::Denoiser;
use crate::error::{Error, Result};
use crate::losses::{build_loss, LossContext};
use crate::optim::Adam;
use crate::render::{renderer_registry, CameraPose, CanonicalView, RendererSpec};
use crate::tensor::{norm, Tensor};

const COLUMNS: [&str; 10] = [
    "step",
    "t",
    "t_min",
    "t_max",
    "grad_norm",
    "delta_dif",
    "delta_cfg",
    "cfg_term",
    "pag_term",
    "target_distance",
];

/// Optimise the image θ directly with the configured loss and Adam.
///
/// Metric rows record θ before the update of that step; `target_distance`
/// is NaN without a target.
pub fn run_2d_distillation(config: &ExperimentConfig, backend: &dyn Denoiser, opts: &RunOptions) -> Result<RunRecord> {
    config.validate()?;
    if config.renderer != "latent-image" {
        return Err(Error::Config(format!(
            "2D distillation needs the latent-image renderer, got `{}`",
            config.renderer
        )));
    }
    let started = std::time::Instant::now();
    let renderer = renderer_registry().build(
        &config.renderer,
        &RendererSpec {
            image_shape: backend.capabilities().latent_shape,
            ..RendererSpec::default()
        },
    )?;
    let out_dir = opts.out_dir.as_deref();
    prepare_out_dir(out_dir, config)?;
    let loss = build_loss(&config.loss_config())?;
    let window = config.window()?;
    let conditions = config.conditioning.conditions(opts.visual_tokens.clone());
    let schedule = backend.schedule().clone();
    let pose = CameraPose::canonical(CanonicalView::Front, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = renderer.init(&mut rng, config.init.scale);
    let mut adam = Adam::with_lr(theta.values.len(), config.step_size);
    let mut metrics = MetricsSink::new(&COLUMNS, out_dir)?;
    let mut snapshots = Vec::new();

    let distance = |x: &Tensor| -> f64 {
        match &opts.target {
            Some(target) => norm(&(x - target)),
            None => f64::NAN,
        }
    };

    for step in 0..config.iterations {
        let last_good = theta.clone();
        let outcome = (|| -> Result<()> {
            let (t_min, t_max) = window.window_at(step)?;
            let t = window.sample_t(step, &mut rng, &schedule)?;
            let x0 = renderer.render(&theta, &pose)?;
            let report = loss.gradient(LossContext {
                x0: &x0,
                t,
                conditions: &conditions,
                backend,
                rng: &mut rng,
            })?;
            let grad = renderer.backward(&theta, &pose, &report.grad)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::non_finite(format!("gradient at step {step}")));
            }
            metrics.push(vec![
                step as f64,
                t as f64,
                t_min,
                t_max,
                norm(&report.grad),
                report.term("delta_dif"),
                report.term("delta_cfg"),
                report.term("cfg_term"),
                report.term("pag_term"),
                distance(&x0),
            ])?;
            if is_snapshot_step(step, config) {
                let e = &report.estimates;
                snapshots.push(Snapshot {
                    step,
                    images: [
                        ("x0", x0.clone()),
                        ("x0_cond", e.x0_cond.clone()),
                        ("x0_uncond", e.x0_uncond.clone()),
                        ("x0_guided", e.x0_guided.clone()),
                    ]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
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

    let final_image = renderer.render(&theta, &pose)?;
    let mut summary = BTreeMap::new();
    if opts.target.is_some() {
        let initial = metrics.table.column("target_distance").and_then(|c| c.first().copied());
        summary.insert("initial_distance".to_string(), initial.unwrap_or(f64::NAN));
        summary.insert("final_distance".to_string(), distance(&final_image));
    }
    finish_run(
        RunKind::Distill2d,
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
