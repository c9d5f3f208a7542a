use scoredistill::backends::ToyDenoiser;
use scoredistill::conditioning::PromptSource;
use scoredistill::diffusion::DiffusionSchedule;
use scoredistill::harness::scenes::scene_fixture;
use scoredistill::harness::{run_3d_toy, ExperimentConfig, RunOptions};
use scoredistill::render::{Renderer, VoxelConfig, VoxelRenderer};

fn small() -> (ExperimentConfig, VoxelRenderer) {
    let mut cfg = ExperimentConfig::default_3d();
    cfg.scene.voxel = VoxelConfig {
        grid: 8,
        image: 8,
        samples_per_ray: 16,
        ..VoxelConfig::default()
    };
    cfg.iterations = 12;
    cfg.snapshot_every = 6;
    cfg.seed = 9;
    let renderer = VoxelRenderer::new(cfg.scene.voxel.clone()).unwrap();
    (cfg, renderer)
}

#[test]
fn zero_sgc_weights_reduce_to_vpcsm() {
    let (mut cfg, renderer) = small();
    cfg.sgc.lambda_geo = 0.0;
    cfg.sgc.lambda_sem = 0.0;
    cfg.sgc.lambda_ir = 0.0;
    let toy = ToyDenoiser::init(&renderer.image_shape(), 4, DiffusionSchedule::default(), 2).unwrap();
    let fixture = scene_fixture(1, &renderer, cfg.scene.elevation).unwrap();
    let tokens = toy
        .visual_pipeline()
        .embed(fixture.visual_image.as_ref().unwrap(), PromptSource::Reference)
        .unwrap()
        .embedding;
    let opts = RunOptions {
        visual_tokens: Some(tokens),
        ..RunOptions::default()
    };
    let rec = run_3d_toy(&cfg, &toy, &fixture, &opts).unwrap();
    for c in ["sgc_grad_norm", "L_depth", "L_normal", "L_semantic", "L_IR", "L_SGC"] {
        assert!(rec.metrics.column(c).unwrap().iter().all(|v| *v == 0.0), "{c}");
    }
    assert!(rec.metrics.column("vpcsm_grad_norm").unwrap().iter().all(|v| *v > 0.0));
    assert!(rec.metrics.column("pag_term").unwrap().iter().any(|v| *v > 0.0));
    assert!(rec.summary.contains_key("depth_pearson_min"));
}

#[test]
fn window_collapses_at_a_third_and_artifacts_are_written() {
    let (cfg, renderer) = small();
    let toy = ToyDenoiser::init(&renderer.image_shape(), 4, DiffusionSchedule::default(), 2).unwrap();
    let fixture = scene_fixture(2, &renderer, cfg.scene.elevation).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let rec = run_3d_toy(&cfg, &toy, &fixture, &opts).unwrap();
    let t_max = rec.metrics.column("t_max").unwrap();
    assert!((t_max[0] - 0.98).abs() < 1e-12);
    assert!(t_max[4..].iter().all(|v| (v - 0.78).abs() < 1e-12));
    assert!(t_max[3] > 0.78);
    assert!(rec.metrics.column("L_SGC").unwrap().iter().all(|v| v.is_finite()));
    assert_eq!(rec.snapshots.len(), 3);
    assert_eq!(rec.snapshots[0].images.len(), 4);
    assert!(dir.path().join("snapshots/step_00000_front.png").is_file());
}

#[test]
fn wrong_renderer_is_rejected() {
    let (mut cfg, renderer) = small();
    cfg.renderer = "latent-image".into();
    let toy = ToyDenoiser::init(&renderer.image_shape(), 4, DiffusionSchedule::default(), 2).unwrap();
    let fixture = scene_fixture(0, &renderer, cfg.scene.elevation).unwrap();
    assert!(run_3d_toy(&cfg, &toy, &fixture, &RunOptions::default()).is_err());
}
