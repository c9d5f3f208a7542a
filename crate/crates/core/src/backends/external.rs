//! Adapter seam for a pretrained latent-diffusion model served by a separate
//! process.
//!
//! Opt in with `SCOREDISTILL_EXTERNAL=1` and point
//! `SCOREDISTILL_EXTERNAL_WEIGHTS` at a model directory containing
//! `adapter.json` and a diffusers-style `scheduler_config.json` (either at the
//! top level or under `scheduler/`). `adapter.json` names the server command
//! and the latent geometry:
//!
//! ```json
//! { "command": ["python", "serve.py"], "latent_shape": [4, 64, 64],
//!   "visual_tokens": [4, 768], "perturbed_attention": true,
//!   "attention_blocks": ["down.0.sa", "mid.sa"] }
//! ```
//!
//! The server reads one JSON request per line on stdin and answers one JSON
//! object per line on stdout. Requests carry an `op` of `predict`,
//! `schedule`, `encode`, `decode`, `generate` or `embed_image`.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::backends::{Denoiser, DenoiserCapabilities, DenoiserQuery};
use crate::conditioning::TextCondition;
use crate::diffusion::{make_schedule, DiffusionSchedule, ScheduleFamily};
use crate::error::{Error, Result};
use crate::guidance::PagBlocks;
use crate::tensor::{from_vec, Tensor};

pub const ENV_OPT_IN: &str = "SCOREDISTILL_EXTERNAL";
pub const ENV_WEIGHTS: &str = "SCOREDISTILL_EXTERNAL_WEIGHTS";

/// Request/response channel to the model server.
pub trait Transport: Send {
    fn call(&mut self, request: &Value) -> Result<Value>;
}

pub struct ProcessTransport {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ProcessTransport {
    pub fn spawn(command: &[String], cwd: &Path, device: &str) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("adapter command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .current_dir(cwd)
            .env("SCOREDISTILL_DEVICE", device)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Unavailable(format!("could not start adapter `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { child, stdin, stdout })
    }
}

impl Transport for ProcessTransport {
    fn call(&mut self, request: &Value) -> Result<Value> {
        serde_json::to_writer(&mut self.stdin, request)?;
        self.stdin.write_all(b"\n")?;
        self.stdin.flush()?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line)? == 0 {
            return Err(Error::Unavailable("adapter process closed its output".into()));
        }
        let reply: Value = serde_json::from_str(&line)?;
        if let Some(err) = reply.get("error") {
            return Err(Error::Unavailable(format!("adapter error: {err}")));
        }
        Ok(reply)
    }
}

impl Drop for ProcessTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct AdapterConfig {
    pub command: Vec<String>,
    pub latent_shape: Vec<usize>,
    #[serde(default)]
    pub visual_tokens: Option<(usize, usize)>,
    #[serde(default)]
    pub perturbed_attention: bool,
    #[serde(default)]
    pub attention_blocks: Vec<String>,
    #[serde(default = "default_min_t")]
    pub min_timestep: usize,
}

fn default_min_t() -> usize {
    0
}

/// The subset of a diffusers scheduler config that fixes the β schedule.
#[derive(Debug, Clone, Deserialize)]
pub struct SchedulerConfig {
    pub num_train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_schedule: String,
}

impl SchedulerConfig {
    pub fn read(dir: &Path) -> Result<Self> {
        let candidates = [dir.join("scheduler_config.json"), dir.join("scheduler").join("scheduler_config.json")];
        let path = candidates
            .iter()
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Unavailable(format!("no scheduler_config.json under {}", dir.display())))?;
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        let family = match self.beta_schedule.as_str() {
            "linear" => ScheduleFamily::Linear {
                beta_start: self.beta_start,
                beta_end: self.beta_end,
            },
            "scaled_linear" => ScheduleFamily::ScaledLinear {
                beta_start: self.beta_start,
                beta_end: self.beta_end,
            },
            "squaredcos_cap_v2" => ScheduleFamily::with_defaults("cosine")?,
            other => {
                return Err(Error::UnknownName {
                    kind: "scheduler beta_schedule",
                    name: other.into(),
                    known: "linear, scaled_linear, squaredcos_cap_v2".into(),
                })
            }
        };
        make_schedule(self.num_train_timesteps, family)
    }
}

pub struct ExternalDenoiser {
    id: String,
    config: AdapterConfig,
    schedule: DiffusionSchedule,
    transport: Mutex<Box<dyn Transport>>,
}

impl std::fmt::Debug for ExternalDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalDenoiser").field("id", &self.id).finish_non_exhaustive()
    }
}

/// Model directory named by the environment, if the opt-in flag is set.
pub fn configured_weights() -> Result<PathBuf> {
    if std::env::var(ENV_OPT_IN).map(|v| v == "1").unwrap_or(false) {
        let dir = std::env::var_os(ENV_WEIGHTS)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Unavailable(format!("{ENV_OPT_IN}=1 but {ENV_WEIGHTS} is not set")))?;
        if !dir.is_dir() {
            return Err(Error::Unavailable(format!("model directory {} does not exist", dir.display())));
        }
        Ok(dir)
    } else {
        Err(Error::Unavailable(format!(
            "external adapter is opt-in: set {ENV_OPT_IN}=1 and {ENV_WEIGHTS}=<model dir>"
        )))
    }
}

impl ExternalDenoiser {
    pub fn from_env(device: &str) -> Result<Self> {
        Self::open(&configured_weights()?, device)
    }

    pub fn open(dir: &Path, device: &str) -> Result<Self> {
        let adapter_path = dir.join("adapter.json");
        if !adapter_path.is_file() {
            return Err(Error::Unavailable(format!("missing {}", adapter_path.display())));
        }
        let config: AdapterConfig = serde_json::from_slice(&std::fs::read(&adapter_path)?)?;
        let schedule = SchedulerConfig::read(dir)?.schedule()?;
        let transport = ProcessTransport::spawn(&config.command, dir, device)?;
        Ok(Self::with_transport(dir.display().to_string(), config, schedule, Box::new(transport)))
    }

    pub fn with_transport(id: String, config: AdapterConfig, schedule: DiffusionSchedule, transport: Box<dyn Transport>) -> Self {
        Self {
            id,
            config,
            schedule,
            transport: Mutex::new(transport),
        }
    }

    fn call(&self, request: Value) -> Result<Value> {
        let mut t = self
            .transport
            .lock()
            .map_err(|_| Error::Unavailable("adapter transport poisoned".into()))?;
        t.call(&request)
    }

    /// The server's own ᾱ table (index 0 is t = 1).
    pub fn reported_alpha_bars(&self) -> Result<Vec<f64>> {
        let reply = self.call(json!({ "op": "schedule" }))?;
        Ok(serde_json::from_value(reply["alphas_cumprod"].clone())?)
    }

    /// Image (H × W × 3, values in [0, 1]) to model latent.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let reply = self.call(json!({ "op": "encode", "shape": image.shape(), "data": image.iter().collect::<Vec<_>>() }))?;
        tensor_from_reply(&reply)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let reply = self.call(json!({ "op": "decode", "shape": latent.shape(), "data": latent.iter().collect::<Vec<_>>() }))?;
        tensor_from_reply(&reply)
    }

    /// Text-to-image generation, used for self-guidance visual prompts.
    pub fn generate(&self, prompt: &str, steps: usize, seed: u64) -> Result<Tensor> {
        let reply = self.call(json!({ "op": "generate", "prompt": prompt, "steps": steps, "seed": seed }))?;
        tensor_from_reply(&reply)
    }

    /// Image prompt to visual tokens (tokens × width) via the adapter's image encoder and projector.
    pub fn embed_image(&self, image: &Tensor) -> Result<ndarray::Array2<f64>> {
        let reply = self.call(json!({ "op": "embed_image", "shape": image.shape(), "data": image.iter().collect::<Vec<_>>() }))?;
        let tokens = tensor_from_reply(&reply)?;
        tokens
            .into_dimensionality()
            .map_err(|_| Error::InvalidArgument("adapter returned visual tokens that are not rank 2".into()))
    }
}

fn tensor_from_reply(reply: &Value) -> Result<Tensor> {
    let shape: Vec<usize> = serde_json::from_value(reply["shape"].clone())?;
    let data: Vec<f64> = serde_json::from_value(reply["data"].clone())?;
    from_vec(&shape, data)
}

impl Denoiser for ExternalDenoiser {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> DenoiserCapabilities {
        DenoiserCapabilities {
            supports_visual_condition: self.config.visual_tokens.is_some(),
            supports_perturbed_attention: self.config.perturbed_attention,
            concurrent_queries: false,
            latent_shape: self.config.latent_shape.clone(),
            horizon: self.schedule.horizon(),
            min_timestep: self.config.min_timestep,
            visual_tokens: self.config.visual_tokens,
            vocab: None,
            attention_blocks: self.config.attention_blocks.clone(),
        }
    }

    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn evaluate(&self, query: &DenoiserQuery<'_>) -> Result<Tensor> {
        let text = match &query.conditions.text {
            TextCondition::Null => json!(null),
            TextCondition::Prompt(p) => json!({ "prompt": p }),
            TextCondition::Embedding(e) => json!({ "embedding": e }),
            TextCondition::Token(_) => {
                return Err(Error::Capability("external adapter takes prompt text, not token ids".into()))
            }
        };
        let visual = query
            .conditions
            .visual
            .as_ref()
            .map(|v| json!({ "shape": [v.nrows(), v.ncols()], "data": v.iter().collect::<Vec<_>>() }));
        let blocks = match query.pag_blocks {
            PagBlocks::All => json!("all"),
            PagBlocks::Named(b) => json!(b),
        };
        let reply = self.call(json!({
            "op": "predict",
            "shape": query.x.shape(),
            "data": query.x.iter().collect::<Vec<_>>(),
            "t": query.t,
            "text": text,
            "visual": visual,
            "tau": query.conditions.fusion_scale,
            "perturb_attention": query.perturb_attention,
            "pag_blocks": blocks,
        }))?;
        tensor_from_reply(&reply)
    }
}
