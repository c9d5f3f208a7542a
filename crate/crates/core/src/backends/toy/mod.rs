//! Trainable toy denoiser: the network in [`net`], its DDPM training loop,
//! and the versioned weights file.

pub mod net;
mod weights;

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backends::{Denoiser, DenoiserCapabilities, DenoiserQuery};
use crate::conditioning::{
    embed_visual_prompt, ImageEncoder, LinearProjector, MeanPoolEncoder, PromptSource, TextCondition,
    TokenProjector, VisualPrompt,
};
use crate::datasets::SampleSource;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{from_vec, Tensor};

pub use net::{BatchInput, ToyNet, ToyNetConfig, SELF_ATTENTION_BLOCK};
pub use weights::{read_weights, write_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

/// Image encoder and token projector that turn a visual prompt image into
/// the network's visual tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPipeline {
    pub encoder: MeanPoolEncoder,
    pub projector: LinearProjector,
}

impl VisualPipeline {
    pub fn random<R: Rng + ?Sized>(
        input_len: usize,
        pool: usize,
        features: usize,
        tokens: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            encoder: MeanPoolEncoder::random(input_len, pool, features, rng)?,
            projector: LinearProjector::random(features, tokens, width, rng),
        })
    }

    pub fn embed(&self, image: &Tensor, source: PromptSource) -> Result<VisualPrompt> {
        embed_visual_prompt(image, source, &self.encoder, &self.projector)
    }

    fn tokens_of(&self, flat: &[f64]) -> Result<Array2<f64>> {
        let image = from_vec(&[flat.len()], flat.to_vec())?;
        self.projector.project(&self.encoder.encode(&image)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Final learning rate as a fraction of the initial one (cosine decay).
    pub lr_floor: f64,
    /// Probability of dropping text and visual together, giving (∅, ∅).
    pub cond_dropout: f64,
    /// Probability of dropping only the text condition.
    pub text_dropout: f64,
    /// Probability of dropping only the visual condition.
    pub visual_dropout: f64,
    /// Fusion scale used while training with a visual condition.
    pub train_tau: f64,
    pub heldout_samples: usize,
    pub mse_threshold: Option<f64>,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 128,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            lr_floor: 0.05,
            cond_dropout: 0.1,
            text_dropout: 0.1,
            visual_dropout: 0.5,
            train_tau: 1.0,
            heldout_samples: 4096,
            mse_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub heldout_mse: f64,
}

/// Everything needed to rebuild a toy denoiser, minus the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyHeader {
    pub net: ToyNetConfig,
    pub latent_shape: Vec<usize>,
    pub betas: Vec<f64>,
    pub visual: VisualPipeline,
    pub training: Option<TrainingSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    net: ToyNet,
    visual: VisualPipeline,
    schedule: DiffusionSchedule,
    latent_shape: Vec<usize>,
    training: Option<TrainingSummary>,
}

impl ToyDenoiser {
    /// Freshly initialized network for samples of `latent_shape`.
    pub fn init(
        latent_shape: &[usize],
        vocab: usize,
        schedule: DiffusionSchedule,
        seed: u64,
    ) -> Result<Self> {
        let dim: usize = latent_shape.iter().product();
        let cfg = Self::default_config(dim, vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = ToyNet::new(cfg.clone(), &mut rng)?;
        let pool = if dim.is_multiple_of(4) && dim >= 64 { 4 } else { 1 };
        let visual = VisualPipeline::random(dim, pool, 16, cfg.visual_tokens, cfg.visual_width, &mut rng)?;
        Ok(Self {
            net,
            visual,
            schedule,
            latent_shape: latent_shape.to_vec(),
            training: None,
        })
    }

    pub fn default_config(input_dim: usize, vocab: usize) -> ToyNetConfig {
        ToyNetConfig {
            input_dim,
            hidden: 64,
            tokens: 4,
            time_features: 32,
            vocab,
            visual_tokens: 4,
            visual_width: 8,
            pre_blocks: 2,
            post_blocks: 2,
        }
    }

    pub fn from_parts(header: ToyHeader, params: Vec<f64>) -> Result<Self> {
        let dim: usize = header.latent_shape.iter().product();
        if dim != header.net.input_dim {
            return Err(Error::WeightsFormat(format!(
                "latent shape {:?} does not match network input width {}",
                header.latent_shape, header.net.input_dim
            )));
        }
        let schedule = DiffusionSchedule::from_betas(header.betas)?;
        Ok(Self {
            net: ToyNet::from_params(header.net, params)?,
            visual: header.visual,
            schedule,
            latent_shape: header.latent_shape,
            training: header.training,
        })
    }

    pub fn header(&self) -> ToyHeader {
        ToyHeader {
            net: self.net.config().clone(),
            latent_shape: self.latent_shape.clone(),
            betas: self.schedule.betas().to_vec(),
            visual: self.visual.clone(),
            training: self.training.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = read_weights(path)?;
        Self::from_parts(header, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_weights(path, &self.header(), self.net.params())
    }

    pub fn net(&self) -> &ToyNet {
        &self.net
    }

    pub fn visual_pipeline(&self) -> &VisualPipeline {
        &self.visual
    }

    pub fn training_summary(&self) -> Option<&TrainingSummary> {
        self.training.as_ref()
    }

    pub fn vocab(&self) -> usize {
        self.net.config().vocab
    }

    fn label_of(&self, text: &TextCondition) -> Result<usize> {
        match text {
            TextCondition::Null => Ok(self.vocab()),
            TextCondition::Token(i) if *i < self.vocab() => Ok(*i),
            TextCondition::Token(i) => Err(Error::InvalidArgument(format!(
                "prompt token {i} outside vocabulary of {}",
                self.vocab()
            ))),
            TextCondition::Embedding(_) | TextCondition::Prompt(_) => Err(Error::Capability(
                "toy denoiser takes token prompts, not embeddings".into(),
            )),
        }
    }

    /// Batched text-only prediction; `None` labels are the null prompt.
    pub fn predict_rows(&self, xs: ArrayView2<'_, f64>, ts: &[usize], labels: &[Option<usize>]) -> Result<Array2<f64>> {
        let t: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let labels: Vec<usize> = labels.iter().map(|l| l.unwrap_or(self.vocab())).collect();
        let tau = vec![0.0; ts.len()];
        self.net.forward(&BatchInput {
            x: xs,
            t: &t,
            labels: &labels,
            visual: None,
            tau: &tau,
            perturb: false,
        })
    }

    /// DDPM ε-prediction training. Returns the trained denoiser; fails with
    /// the step index on a non-finite loss and with the measured MSE when a
    /// configured held-out threshold is missed.
    pub fn train(mut self, data: &dyn SampleSource, config: &ToyTrainConfig, seed: u64) -> Result<Self> {
        if data.dim() != self.net.config().input_dim {
            return Err(Error::shape("training samples", &[self.net.config().input_dim], &[data.dim()]));
        }
        if data.classes() > self.vocab() {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} classes but the vocabulary holds {}",
                data.classes(),
                self.vocab()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
        let mut opt = Adam::new(self.net.num_params(), config.adam);
        let mut grads = vec![0.0; self.net.num_params()];
        let mut final_loss = f64::NAN;
        for step in 0..config.steps {
            let progress = step as f64 / config.steps.max(1) as f64;
            let decay = config.lr_floor + (1.0 - config.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            opt.config.lr = config.adam.lr * decay;
            let batch = self.draw_batch(data, config, true, &mut rng)?;
            let (pred, cache) = self.net.forward_cached(&batch.input())?;
            let n = pred.len() as f64;
            let diff = &pred - &batch.eps;
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { step });
            }
            final_loss = loss;
            let d_out = diff * (2.0 / n);
            grads.iter_mut().for_each(|g| *g = 0.0);
            self.net.backward(&cache, &d_out, &mut grads);
            opt.step(self.net.params_mut(), &grads);
        }
        let heldout_mse = self.heldout_mse(data, config.heldout_samples, seed)?;
        self.training = Some(TrainingSummary {
            seed,
            steps: config.steps,
            final_loss,
            heldout_mse,
        });
        if let Some(threshold) = config.mse_threshold {
            if !(heldout_mse < threshold) {
                return Err(Error::ThresholdNotMet {
                    mse: heldout_mse,
                    threshold,
                });
            }
        }
        Ok(self)
    }

    /// ε-MSE on text-conditioned noised samples from a held-out stream.
    pub fn heldout_mse(&self, data: &dyn SampleSource, samples: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6c64);
        let cfg = ToyTrainConfig {
            batch_size: 512,
            cond_dropout: 0.0,
            text_dropout: 0.0,
            visual_dropout: 1.0,
            ..ToyTrainConfig::default()
        };
        let mut total = 0.0;
        let mut count = 0usize;
        while count < samples {
            let batch = self.draw_batch(data, &cfg, false, &mut rng)?;
            let pred = self.net.forward(&batch.input())?;
            total += (&pred - &batch.eps).iter().map(|d| d * d).sum::<f64>();
            count += pred.nrows();
        }
        Ok(total / (count * self.net.config().input_dim) as f64)
    }

    fn draw_batch(&self, data: &dyn SampleSource, cfg: &ToyTrainConfig, with_visual: bool, rng: &mut dyn RngCore) -> Result<TrainBatch> {
        let b = cfg.batch_size;
        let ncfg = self.net.config();
        let (d, m, w) = (ncfg.input_dim, ncfg.visual_tokens, ncfg.visual_width);
        let horizon = self.schedule.horizon();
        let mut x = Array2::zeros((b, d));
        let mut eps = Array2::zeros((b, d));
        let mut t = Vec::with_capacity(b);
        let mut labels = Vec::with_capacity(b);
        let mut tau = vec![0.0; b];
        let mut visual = Array2::zeros((b * m, w));
        for i in 0..b {
            let s = data.draw(rng);
            let ti = rng.random_range(1..=horizon);
            let ab = self.schedule.alpha_bar(ti)?;
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                eps[[i, j]] = e;
                x[[i, j]] = ab.sqrt() * s.x[j] + (1.0 - ab).sqrt() * e;
            }
            t.push(ti as f64);
            let joint_drop = rng.random::<f64>() < cfg.cond_dropout;
            let text_drop = rng.random::<f64>() < cfg.text_dropout;
            let visual_drop = rng.random::<f64>() < cfg.visual_dropout;
            labels.push(if joint_drop || text_drop { ncfg.vocab } else { s.label });
            if with_visual && !joint_drop && !visual_drop {
                let tokens = self.visual.tokens_of(&s.companion)?;
                visual.slice_mut(ndarray::s![i * m..(i + 1) * m, ..]).assign(&tokens);
                tau[i] = cfg.train_tau;
            }
        }
        Ok(TrainBatch {
            x,
            eps,
            t,
            labels,
            tau,
            visual,
        })
    }
}

struct TrainBatch {
    x: Array2<f64>,
    eps: Array2<f64>,
    t: Vec<f64>,
    labels: Vec<usize>,
    tau: Vec<f64>,
    visual: Array2<f64>,
}

impl TrainBatch {
    fn input(&self) -> BatchInput<'_> {
        BatchInput {
            x: self.x.view(),
            t: &self.t,
            labels: &self.labels,
            visual: Some(self.visual.view()),
            tau: &self.tau,
            perturb: false,
        }
    }
}

impl Denoiser for ToyDenoiser {
    fn id(&self) -> &str {
        "toy"
    }

    fn capabilities(&self) -> DenoiserCapabilities {
        let c = self.net.config();
        DenoiserCapabilities {
            supports_visual_condition: true,
            supports_perturbed_attention: true,
            concurrent_queries: true,
            latent_shape: self.latent_shape.clone(),
            horizon: self.schedule.horizon(),
            min_timestep: 0,
            visual_tokens: Some((c.visual_tokens, c.visual_width)),
            vocab: Some(c.vocab),
            attention_blocks: vec![SELF_ATTENTION_BLOCK.to_string()],
        }
    }

    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn evaluate(&self, query: &DenoiserQuery<'_>) -> Result<Tensor> {
        let c = self.net.config();
        let label = self.label_of(&query.conditions.text)?;
        let x = ArrayView2::from_shape((1, c.input_dim), query.x.as_slice().ok_or_else(|| {
            Error::InvalidArgument("denoiser input must be contiguous".into())
        })?)
        .map_err(|_| Error::shape("toy denoiser input", &[c.input_dim], query.x.shape()))?;
        let visual = match &query.conditions.visual {
            Some(v) if v.dim() != (c.visual_tokens, c.visual_width) => {
                return Err(Error::shape(
                    "visual tokens",
                    &[c.visual_tokens, c.visual_width],
                    &[v.nrows(), v.ncols()],
                ))
            }
            Some(v) => Some(v.view()),
            None => None,
        };
        let perturb = query.perturb_attention && query.pag_blocks.contains(SELF_ATTENTION_BLOCK);
        let out = self.net.forward(&BatchInput {
            x,
            t: &[query.t as f64],
            labels: &[label],
            visual,
            tau: &[query.conditions.fusion_scale],
            perturb,
        })?;
        from_vec(query.x.shape(), out.into_raw_vec_and_offset().0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::predict;
    use crate::conditioning::ConditionSet;
    use crate::datasets::MixtureDataset;
    use crate::guidance::PagBlocks;

    fn quick() -> ToyTrainConfig {
        ToyTrainConfig {
            steps: 30,
            batch_size: 16,
            heldout_samples: 64,
            ..ToyTrainConfig::default()
        }
    }

    #[test]
    fn training_is_seed_reproducible() {
        let data = MixtureDataset::standard();
        let s = DiffusionSchedule::default();
        let a = ToyDenoiser::init(&[2], 4, s.clone(), 5).unwrap().train(&data, &quick(), 9).unwrap();
        let b = ToyDenoiser::init(&[2], 4, s, 5).unwrap().train(&data, &quick(), 9).unwrap();
        assert_eq!(a.net().params(), b.net().params());
    }

    #[test]
    fn threshold_failure_is_reported() {
        let data = MixtureDataset::standard();
        let cfg = ToyTrainConfig {
            mse_threshold: Some(1e-9),
            ..quick()
        };
        let err = ToyDenoiser::init(&[2], 4, DiffusionSchedule::default(), 5)
            .unwrap()
            .train(&data, &cfg, 1)
            .unwrap_err();
        assert!(matches!(err, Error::ThresholdNotMet { .. }));
    }

    #[test]
    fn queries_are_deterministic_and_hooks_work() {
        let d = ToyDenoiser::init(&[2], 4, DiffusionSchedule::default(), 3).unwrap();
        let x = from_vec(&[2], vec![0.3, -0.4]).unwrap();
        let c = ConditionSet::text(TextCondition::Token(1));
        let q = DenoiserQuery::new(&x, 300, &c);
        let a = predict(&d, &q).unwrap();
        assert_eq!(a, predict(&d, &q).unwrap());
        let all = PagBlocks::All;
        assert_ne!(a, predict(&d, &q.perturbed(&all)).unwrap());
        let none = PagBlocks::Named(vec!["other".into()]);
        assert_eq!(a, predict(&d, &q.perturbed(&none)).unwrap());
        let bad = ConditionSet::text(TextCondition::Token(4));
        assert!(predict(&d, &DenoiserQuery::new(&x, 300, &bad)).is_err());
    }
}
