//! Text/visual conditions and the decoupled attention fusion that injects
//! image tokens next to text tokens.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::softmax_rows;
use crate::tensor::Tensor;

/// Text condition y, or the null condition ∅.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub enum TextCondition {
    #[default]
    Null,
    /// Index into a backend's prompt vocabulary (class labels for toy backends).
    Token(usize),
    /// Precomputed text embedding.
    Embedding(Vec<f64>),
    /// Raw prompt text for backends with their own text encoder.
    Prompt(String),
}

impl TextCondition {
    pub fn is_null(&self) -> bool {
        matches!(self, TextCondition::Null)
    }
}

/// What a denoiser query is conditioned on: (y, v) plus the fusion scale τ.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub text: TextCondition,
    /// Visual token sequence v (tokens × width). `None` is the null visual
    /// condition, equivalent to an all-zero token sequence.
    pub visual: Option<Array2<f64>>,
    pub fusion_scale: f64,
}

impl Default for ConditionSet {
    fn default() -> Self {
        Self::null()
    }
}

impl ConditionSet {
    /// (∅, ∅).
    pub fn null() -> Self {
        Self {
            text: TextCondition::Null,
            visual: None,
            fusion_scale: 0.0,
        }
    }

    pub fn text(text: TextCondition) -> Self {
        Self {
            text,
            visual: None,
            fusion_scale: 0.0,
        }
    }

    pub fn with_visual(mut self, tokens: Array2<f64>, fusion_scale: f64) -> Self {
        self.visual = Some(tokens);
        self.fusion_scale = fusion_scale;
        self
    }

    /// Same visual condition with the text nulled: (∅, v).
    pub fn null_text(&self) -> Self {
        Self {
            text: TextCondition::Null,
            ..self.clone()
        }
    }

    pub fn has_visual(&self) -> bool {
        self.visual.as_ref().is_some_and(|v| v.iter().any(|x| *x != 0.0))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fusion_scale.is_finite() && self.fusion_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "fusion scale tau must be finite and non-negative, got {}",
                self.fusion_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    /// Generated from the text prompt by a text-to-image model.
    SelfGuidance,
    /// Supplied by the user.
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualPrompt {
    pub source: PromptSource,
    pub image: Tensor,
    pub embedding: Array2<f64>,
}

pub trait ImageEncoder: Send + Sync {
    fn encode(&self, image: &Tensor) -> Result<Array1<f64>>;
}

pub trait TokenProjector: Send + Sync {
    fn project(&self, features: &Array1<f64>) -> Result<Array2<f64>>;
    fn token_count(&self) -> usize;
}

/// Mean-pool consecutive groups of `pool` values, then a bias-free linear map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanPoolEncoder {
    pub pool: usize,
    /// out × (input_len / pool)
    pub weight: Array2<f64>,
}

impl MeanPoolEncoder {
    pub fn random<R: Rng + ?Sized>(input_len: usize, pool: usize, out: usize, rng: &mut R) -> Result<Self> {
        if pool == 0 || !input_len.is_multiple_of(pool) {
            return Err(Error::InvalidArgument(format!(
                "pool size {pool} must divide the input length {input_len}"
            )));
        }
        let inputs = input_len / pool;
        let scale = 1.0 / (inputs as f64).sqrt();
        let weight = Array2::from_shape_fn((out, inputs), |_| rng.sample::<f64, _>(StandardNormal) * scale);
        Ok(Self { pool, weight })
    }
}

impl ImageEncoder for MeanPoolEncoder {
    fn encode(&self, image: &Tensor) -> Result<Array1<f64>> {
        let n = image.len();
        if n != self.weight.ncols() * self.pool {
            return Err(Error::shape(
                "mean-pool encoder input",
                &[self.weight.ncols() * self.pool],
                &[n],
            ));
        }
        let flat: Vec<f64> = image.iter().copied().collect();
        let pooled: Array1<f64> = flat
            .chunks(self.pool)
            .map(|c| c.iter().sum::<f64>() / self.pool as f64)
            .collect();
        Ok(self.weight.dot(&pooled))
    }
}

/// Bias-free linear map from features to `tokens × width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProjector {
    pub tokens: usize,
    pub width: usize,
    /// (tokens · width) × features
    pub weight: Array2<f64>,
}

impl LinearProjector {
    pub fn random<R: Rng + ?Sized>(features: usize, tokens: usize, width: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (features as f64).sqrt();
        let weight = Array2::from_shape_fn((tokens * width, features), |_| {
            rng.sample::<f64, _>(StandardNormal) * scale
        });
        Self { tokens, width, weight }
    }
}

impl TokenProjector for LinearProjector {
    fn project(&self, features: &Array1<f64>) -> Result<Array2<f64>> {
        if features.len() != self.weight.ncols() {
            return Err(Error::shape("token projector input", &[self.weight.ncols()], &[features.len()]));
        }
        let flat = self.weight.dot(features);
        Ok(flat
            .into_shape_with_order((self.tokens, self.width))
            .expect("projector rows are tokens * width"))
    }

    fn token_count(&self) -> usize {
        self.tokens
    }
}

/// Encode and project an image into a visual prompt token sequence.
pub fn embed_visual_prompt(
    image: &Tensor,
    source: PromptSource,
    encoder: &dyn ImageEncoder,
    projector: &dyn TokenProjector,
) -> Result<VisualPrompt> {
    let features = encoder.encode(image)?;
    let embedding = projector.project(&features)?;
    Ok(VisualPrompt {
        source,
        image: image.clone(),
        embedding,
    })
}

/// All-zero token sequence used as the null visual condition.
pub fn null_visual_tokens(tokens: usize, width: usize) -> Array2<f64> {
    Array2::zeros((tokens, width))
}

/// `softmax(Q Kᵀ/√d) V + τ · softmax(Q K'ᵀ/√d) V'`, with d the query width.
///
/// Each branch normalizes over its own keys.
pub fn fused_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    k_img: &Array2<f64>,
    v_img: &Array2<f64>,
    tau: f64,
) -> Result<Array2<f64>> {
    let d = q.ncols();
    if d == 0 {
        return Err(Error::InvalidArgument("head dimension must be positive".into()));
    }
    for (name, kk, vv) in [("text", k, v), ("visual", k_img, v_img)] {
        if kk.ncols() != d {
            return Err(Error::shape(format!("{name} keys width"), &[d], &[kk.ncols()]));
        }
        if kk.nrows() != vv.nrows() {
            return Err(Error::shape(format!("{name} key/value rows"), &[kk.nrows()], &[vv.nrows()]));
        }
    }
    if v.ncols() != v_img.ncols() {
        return Err(Error::shape("text/visual value width", &[v.ncols()], &[v_img.ncols()]));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let text = softmax_rows(&(q.dot(&k.t()) * scale)).dot(v);
    if tau == 0.0 {
        return Ok(text);
    }
    let visual = softmax_rows(&(q.dot(&k_img.t()) * scale)).dot(v_img);
    Ok(text + visual * tau)
}
