use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scoredistill::backends::toy::ToyTrainConfig;
use scoredistill::backends::{predict, DenoiserQuery, ToyDenoiser};
use scoredistill::calibration::{calibrate, render_config, AcceptanceConfig};
use scoredistill::conditioning::ConditionSet;
use scoredistill::datasets::{MixtureDataset, SampleSource};
use scoredistill::diffusion::{DiffusionSchedule, NoisyLatent};
use scoredistill::harness::scenes::{scene_fixture, train_scene_denoiser, SCENE_COUNT};
use scoredistill::harness::{report, run_2d_distillation, run_3d_toy, ExperimentConfig, LoadedBackend, RunOptions, RunRecord};
use scoredistill::inversion::{invert_traced, plan_inversion, reverse_along, write_trace_csv};
use scoredistill::losses::LossMode;
use scoredistill::oracles::MixtureSpec;
use scoredistill::render::{VoxelConfig, VoxelRenderer};
use scoredistill::tensor::{from_vec, rel_l2};

#[derive(Parser)]
#[command(name = "scoredistill", version, about = "Score-distillation experiments on toy and external denoisers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy denoiser.
    TrainToy(TrainToyArgs),
    /// Optimise a 2D sample directly with a distillation loss.
    Distill2d(RunArgs),
    /// Optimise a voxel scene with VPCSM plus SGC against a toy scene.
    Distill3dToy(Distill3dArgs),
    /// Invert a sample to t and run the deterministic reverse back.
    Invert(InvertArgs),
    /// Snapshot grids, metric curves and a summary table for run directories.
    Report(ReportArgs),
    /// Backend inspection.
    Backend {
        #[command(subcommand)]
        command: BackendCommand,
    },
    /// Oracle measurements and acceptance thresholds.
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
}

#[derive(Subcommand)]
enum BackendCommand {
    /// Print the capability record as JSON.
    Info {
        #[arg(long, default_value = "toy")]
        backend: String,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Measure the oracles and write the acceptance config.
    Calibrate {
        /// Where to write the config.
        #[arg(long)]
        out: PathBuf,
        /// Reference toy weights; trained from the config's toy section when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Existing config to take thresholds and toy setup from.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4096)]
        samples: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TrainData {
    /// Four-mode 2D Gaussian mixture.
    Mixture,
    /// Random-azimuth renders of the toy voxel scenes.
    Scenes,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory; weights go to `toy.bin`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "mixture")]
    data: TrainData,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fail unless held-out ε-MSE ends below this.
    #[arg(long)]
    eps_mse_threshold: Option<f64>,
}

/// Flags shared by the run commands; each overrides the config key of the same name.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// TOML config overlaid on the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    loss: Option<LossMode>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    pag_scale: Option<f64>,
    #[arg(long)]
    delta_t: Option<usize>,
    #[arg(long)]
    label: Option<usize>,
    #[arg(long)]
    prompt: Option<String>,
    /// Visual fusion scale τ.
    #[arg(long)]
    tau: Option<f64>,
    /// Reference image for the visual prompt.
    #[arg(long)]
    visual_prompt: Option<PathBuf>,
    /// Generate the visual prompt from the text (external adapter only).
    #[arg(long)]
    self_guidance: bool,
    #[arg(long)]
    init_scale: Option<f64>,
}

#[derive(Args)]
struct Distill3dArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Toy scene used as target and reference grid.
    #[arg(long, default_value_t = 0)]
    scene: usize,
    #[arg(long)]
    lambda_geo: Option<f64>,
    #[arg(long)]
    lambda_sem: Option<f64>,
    #[arg(long)]
    lambda_ir: Option<f64>,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "toy")]
    backend: String,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Comma-separated sample; drawn from the four-mode dataset when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    label: usize,
    /// Target timestep; defaults to T/2.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = 50)]
    delta_t: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn apply_run_args(mut cfg: ExperimentConfig, a: &RunArgs) -> Result<ExperimentConfig> {
    if let Some(path) = &a.config {
        cfg = ExperimentConfig::load(path, &cfg)?;
    }
    cfg.seed = a.seed;
    macro_rules! set {
        ($($field:expr => $value:expr),* $(,)?) => {
            $(if let Some(v) = $value.clone() { $field = v; })*
        };
    }
    set! {
        cfg.backend => a.backend,
        cfg.loss.mode => a.loss,
        cfg.iterations => a.iterations,
        cfg.step_size => a.step_size,
        cfg.snapshot_every => a.snapshot_every,
        cfg.guidance.cfg_scale => a.cfg_scale,
        cfg.guidance.pag_scale => a.pag_scale,
        cfg.loss.delta_t => a.delta_t,
        cfg.conditioning.prompt => a.prompt,
        cfg.conditioning.tau => a.tau,
        cfg.init.scale => a.init_scale,
    }
    if a.weights.is_some() {
        cfg.backend_weights = a.weights.clone();
    }
    if a.label.is_some() {
        cfg.conditioning.label = a.label;
    }
    if a.visual_prompt.is_some() {
        cfg.conditioning.visual_prompt = a.visual_prompt.clone();
    }
    if a.self_guidance {
        cfg.conditioning.self_guidance = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_record(record: &RunRecord) {
    println!("config hash {}", record.config_hash);
    println!("wall clock {:.2}s", record.wall_clock_secs);
    for (k, v) in &record.summary {
        println!("{k} = {v:.6}");
    }
    if let Some(dir) = &record.out_dir {
        println!("artifacts in {}", dir.display());
    }
}

fn train_toy(a: &TrainToyArgs) -> Result<()> {
    let defaults = ToyTrainConfig::default();
    let cfg = ToyTrainConfig {
        steps: a.steps.unwrap_or(defaults.steps),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        adam: scoredistill::optim::AdamConfig {
            lr: a.lr.unwrap_or(defaults.adam.lr),
            ..defaults.adam
        },
        mse_threshold: a.eps_mse_threshold,
        ..defaults
    };
    let toy = match a.data {
        TrainData::Mixture => ToyDenoiser::init(&[2], 4, DiffusionSchedule::default(), a.seed)?.train(
            &MixtureDataset::standard(),
            &cfg,
            a.seed,
        )?,
        TrainData::Scenes => {
            let renderer = VoxelRenderer::new(VoxelConfig::default())?;
            train_scene_denoiser(&renderer, ExperimentConfig::default_3d().scene.elevation, &cfg, a.seed)?
        }
    };
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("toy.bin");
    toy.save(&path)?;
    if let Some(s) = toy.training_summary() {
        println!("final loss {:.5}, held-out eps-MSE {:.5}", s.final_loss, s.heldout_mse);
    }
    println!("weights written to {}", path.display());
    Ok(())
}

fn distill2d(a: &RunArgs) -> Result<()> {
    let cfg = apply_run_args(ExperimentConfig::default_2d(), a)?;
    let backend = LoadedBackend::from_config(&cfg)?;
    let visual_tokens = backend.visual_tokens(&cfg, None)?;
    let shape = backend.denoiser().capabilities().latent_shape;
    let target = match (cfg.conditioning.label, shape.as_slice()) {
        (Some(label), [2]) => {
            let modes = MixtureSpec::four_mode().modes;
            let mode = modes.get(label).with_context(|| format!("label {label} has no mode"))?;
            Some(from_vec(&[2], mode.clone())?)
        }
        _ => None,
    };
    let record = run_2d_distillation(
        &cfg,
        backend.denoiser(),
        &RunOptions {
            out_dir: Some(a.out.clone()),
            target,
            visual_tokens,
        },
    )?;
    print_record(&record);
    Ok(())
}

fn distill3d(a: &Distill3dArgs) -> Result<()> {
    if a.scene >= SCENE_COUNT {
        bail!("scene {} does not exist (0..{SCENE_COUNT})", a.scene);
    }
    let mut base = ExperimentConfig::default_3d();
    base.conditioning.label = Some(a.scene);
    let mut cfg = apply_run_args(base, &a.run)?;
    if let Some(v) = a.lambda_geo {
        cfg.sgc.lambda_geo = v;
    }
    if let Some(v) = a.lambda_sem {
        cfg.sgc.lambda_sem = v;
    }
    if let Some(v) = a.lambda_ir {
        cfg.sgc.lambda_ir = v;
    }
    cfg.validate()?;
    let renderer = VoxelRenderer::new(cfg.scene.voxel.clone())?;
    let fixture = scene_fixture(a.scene, &renderer, cfg.scene.elevation)?;
    let backend = LoadedBackend::from_config(&cfg)?;
    let visual_tokens = backend.visual_tokens(&cfg, fixture.visual_image.as_ref())?;
    let record = run_3d_toy(
        &cfg,
        backend.denoiser(),
        &fixture,
        &RunOptions {
            out_dir: Some(a.run.out.clone()),
            target: None,
            visual_tokens,
        },
    )?;
    print_record(&record);
    Ok(())
}

fn invert_cmd(a: &InvertArgs) -> Result<()> {
    let backend = LoadedBackend::open(&a.backend, a.weights.as_deref())?;
    let denoiser = backend.denoiser();
    let schedule = denoiser.schedule().clone();
    let shape = denoiser.capabilities().latent_shape;
    let (x0, label) = match &a.x0 {
        Some(v) => (from_vec(&shape, v.clone())?, a.label),
        None => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
            let s = MixtureDataset::standard().draw(&mut rng);
            (from_vec(&shape, s.x)?, s.label)
        }
    };
    let t = a.t.unwrap_or(schedule.horizon() / 2);
    let plan = plan_inversion(t, a.delta_t, schedule.horizon())?;
    let conditions = ConditionSet::text(scoredistill::conditioning::TextCondition::Token(label));
    let pred = |x: &scoredistill::Tensor, t: usize| predict(denoiser, &DenoiserQuery::new(x, t, &conditions));
    let (xt, trace) = invert_traced(&NoisyLatent::clean(x0.clone())?, &plan, pred, &schedule)?;
    let back = reverse_along(&xt, &plan, pred, &schedule)?;
    let err = rel_l2(&back.data, &x0);
    std::fs::create_dir_all(&a.out)?;
    write_trace_csv(&trace, std::fs::File::create(a.out.join("trace.csv"))?)?;
    let result = serde_json::json!({
        "t": t,
        "delta_t": a.delta_t,
        "ladder": plan.ladder,
        "label": label,
        "x0": x0.iter().collect::<Vec<_>>(),
        "x_t": xt.data.iter().collect::<Vec<_>>(),
        "reconstruction": back.data.iter().collect::<Vec<_>>(),
        "rel_l2": err,
    });
    std::fs::write(a.out.join("inversion.json"), serde_json::to_vec_pretty(&result)?)?;
    println!("rungs {}, round-trip rel. L2 {err:.3e}", plan.k());
    Ok(())
}

fn oracle_calibrate(out: &Path, weights: Option<&Path>, config: Option<&Path>, samples: usize) -> Result<()> {
    let cfg = match config {
        Some(p) => AcceptanceConfig::parse(&std::fs::read_to_string(p)?)?,
        None => AcceptanceConfig::default(),
    };
    let toy = match weights {
        Some(p) => ToyDenoiser::load(p)?,
        None => {
            eprintln!("training reference toy: seed {}, {} steps", cfg.toy.seed, cfg.toy.steps);
            cfg.toy.train(None)?
        }
    };
    let report = calibrate(&cfg, &toy, samples)?;
    let text = render_config(&report)?;
    std::fs::write(out, &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainToy(a) => train_toy(&a),
        Command::Distill2d(a) => distill2d(&a),
        Command::Distill3dToy(a) => distill3d(&a),
        Command::Invert(a) => invert_cmd(&a),
        Command::Report(a) => {
            let summary = report(&a.runs, &a.out)?;
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
            for m in &summary.missing {
                eprintln!("missing {m}");
            }
            Ok(())
        }
        Command::Backend {
            command: BackendCommand::Info { backend, weights },
        } => {
            let b = LoadedBackend::open(&backend, weights.as_deref())?;
            let d = b.denoiser();
            let info = serde_json::json!({ "id": d.id(), "capabilities": d.capabilities() });
            println!("{}", serde_json::to_string_pretty(&info)?);
            Ok(())
        }
        Command::Oracle {
            command: OracleCommand::Calibrate { out, weights, config, samples },
        } => oracle_calibrate(&out, weights.as_deref(), config.as_deref(), samples),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
