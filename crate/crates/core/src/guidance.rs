//! Classifier-free and perturbed-attention guidance over noise predictions.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::{tweedie_x0, DiffusionSchedule, NoisyLatent};
use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Tensor};

/// Which self-attention blocks the perturbation hook replaces.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum PagBlocks {
    #[default]
    All,
    Named(Vec<String>),
}

impl Serialize for PagBlocks {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PagBlocks::All => s.serialize_str("all"),
            PagBlocks::Named(names) => names.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for PagBlocks {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            List(Vec<String>),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) if w == "all" => Ok(PagBlocks::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected \"all\" or a list of block names, got {w:?}"
            ))),
            Raw::List(names) => Ok(PagBlocks::Named(names)),
        }
    }
}

impl PagBlocks {
    pub fn contains(&self, block: &str) -> bool {
        match self {
            PagBlocks::All => true,
            PagBlocks::Named(names) => names.iter().any(|n| n == block),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// CFG scale λ.
    pub cfg_scale: f64,
    /// PAG scale s.
    pub pag_scale: f64,
    pub pag_blocks: PagBlocks,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            cfg_scale: 7.5,
            pag_scale: 1.0,
            pag_blocks: PagBlocks::All,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cfg_scale", self.cfg_scale), ("pag_scale", self.pag_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "guidance.{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Noise predictions at one noisy latent plus their Tweedie estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    pub eps_cond: Tensor,
    pub eps_uncond: Option<Tensor>,
    pub eps_perturbed: Option<Tensor>,
    pub x0_cond: Tensor,
    pub x0_uncond: Option<Tensor>,
}

impl PredictionBundle {
    /// Builds the bundle, deriving both x̃0 estimates from their predictions.
    pub fn new(
        xt: &NoisyLatent,
        eps_cond: Tensor,
        eps_uncond: Option<Tensor>,
        eps_perturbed: Option<Tensor>,
        schedule: &DiffusionSchedule,
    ) -> Result<Self> {
        for (name, e) in [
            ("eps_uncond", eps_uncond.as_ref()),
            ("eps_perturbed", eps_perturbed.as_ref()),
        ] {
            if let Some(e) = e {
                ensure_same_shape(name, &eps_cond, e)?;
            }
        }
        let x0_cond = tweedie_x0(xt, &eps_cond, schedule)?;
        let x0_uncond = eps_uncond
            .as_ref()
            .map(|e| tweedie_x0(xt, e, schedule))
            .transpose()?;
        Ok(Self {
            eps_cond,
            eps_uncond,
            eps_perturbed,
            x0_cond,
            x0_uncond,
        })
    }

    /// Bundle without Tweedie estimates (when no timestep context is at hand).
    pub fn from_predictions(
        eps_cond: Tensor,
        eps_uncond: Option<Tensor>,
        eps_perturbed: Option<Tensor>,
    ) -> Result<Self> {
        for e in [eps_uncond.as_ref(), eps_perturbed.as_ref()].into_iter().flatten() {
            ensure_same_shape("prediction bundle", &eps_cond, e)?;
        }
        Ok(Self {
            x0_cond: eps_cond.clone(),
            eps_cond,
            eps_uncond,
            eps_perturbed,
            x0_uncond: None,
        })
    }

    /// CFG-applied x̃0: `x̃0_con + λ (x̃0_con − x̃0_uncon)`.
    pub fn x0_guided(&self, cfg_scale: f64) -> Option<Tensor> {
        self.x0_uncond.as_ref().map(|u| {
            let mut out = self.x0_cond.clone();
            out.zip_mut_with(u, |c, u| *c += cfg_scale * (*c - u));
            out
        })
    }
}

/// `(1 + λ) ε_cond − λ ε_uncond`.
pub fn apply_cfg(bundle: &PredictionBundle, cfg: &GuidanceConfig) -> Result<Tensor> {
    let uncond = bundle
        .eps_uncond
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("CFG needs an unconditional prediction".into()))?;
    ensure_same_shape("apply_cfg", &bundle.eps_cond, uncond)?;
    let lambda = cfg.cfg_scale;
    if lambda == 0.0 {
        return Ok(bundle.eps_cond.clone());
    }
    let mut out = bundle.eps_cond.clone();
    out.zip_mut_with(uncond, |c, u| *c += lambda * (*c - u));
    Ok(out)
}

/// `ε_cond + s (ε_cond − ε̄)`, with ε̄ the perturbed-attention prediction.
pub fn apply_pag(bundle: &PredictionBundle, cfg: &GuidanceConfig) -> Result<Tensor> {
    let s = cfg.pag_scale;
    if s == 0.0 {
        return Ok(bundle.eps_cond.clone());
    }
    let perturbed = bundle.eps_perturbed.as_ref().ok_or_else(|| {
        Error::InvalidArgument("PAG scale > 0 needs a perturbed-attention prediction".into())
    })?;
    ensure_same_shape("apply_pag", &bundle.eps_cond, perturbed)?;
    let mut out = bundle.eps_cond.clone();
    out.zip_mut_with(perturbed, |c, p| *c += s * (*c - p));
    Ok(out)
}

/// Guidance-only direction `λ (ε_cond − ε_uncond) + s (ε_cond − ε̄)`.
///
/// The PAG term is skipped entirely when `s = 0`, so this equals the plain
/// CFG direction bit-for-bit in that case.
pub fn guidance_direction(bundle: &PredictionBundle, cfg: &GuidanceConfig) -> Result<Tensor> {
    let uncond = bundle
        .eps_uncond
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("guidance needs an unconditional prediction".into()))?;
    ensure_same_shape("guidance_direction", &bundle.eps_cond, uncond)?;
    let lambda = cfg.cfg_scale;
    let mut out = bundle.eps_cond.clone();
    out.zip_mut_with(uncond, |c, u| *c = lambda * (*c - u));
    if cfg.pag_scale != 0.0 {
        let perturbed = bundle.eps_perturbed.as_ref().ok_or_else(|| {
            Error::InvalidArgument("PAG scale > 0 needs a perturbed-attention prediction".into())
        })?;
        ensure_same_shape("guidance_direction", &bundle.eps_cond, perturbed)?;
        let s = cfg.pag_scale;
        ndarray::Zip::from(&mut out)
            .and(&bundle.eps_cond)
            .and(perturbed)
            .for_each(|o, c, p| *o += s * (c - p));
    }
    Ok(out)
}

/// Row-wise softmax, max-shifted.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn check_qkv(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, context: &str) -> Result<()> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape(format!("{context}: query/key width"), &[q.ncols()], &[k.ncols()]));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::shape(format!("{context}: key/value rows"), &[k.nrows()], &[v.nrows()]));
    }
    if q.ncols() == 0 {
        return Err(Error::InvalidArgument(format!("{context}: head dimension must be positive")));
    }
    Ok(())
}

/// Self-attention map `A = softmax(Q Kᵀ / √d)`.
pub fn attention_map(q: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let d = q.ncols() as f64;
    softmax_rows(&(q.dot(&k.t()) / d.sqrt()))
}

/// Standard scaled dot-product attention `A V`.
pub fn self_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>> {
    check_qkv(q, k, v, "self_attention")?;
    Ok(attention_map(q, k).dot(v))
}

/// Perturbed self-attention: the attention map is replaced by the identity,
/// so the output is `V`. Q and K are only shape-checked.
pub fn perturb_self_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>> {
    check_qkv(q, k, v, "perturb_self_attention")?;
    if q.nrows() != v.nrows() {
        return Err(Error::shape(
            "perturb_self_attention: identity map needs as many queries as values",
            &[v.nrows()],
            &[q.nrows()],
        ));
    }
    Ok(v.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{from_vec, randn};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle(seed: u64) -> PredictionBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PredictionBundle::from_predictions(
            randn(&[6], &mut rng),
            Some(randn(&[6], &mut rng)),
            Some(randn(&[6], &mut rng)),
        )
        .unwrap()
    }

    #[test]
    fn cfg_zero_scale_is_identity() {
        let b = bundle(1);
        let cfg = GuidanceConfig {
            cfg_scale: 0.0,
            ..Default::default()
        };
        assert_eq!(apply_cfg(&b, &cfg).unwrap(), b.eps_cond);
    }

    #[test]
    fn cfg_equal_predictions_is_identity() {
        let mut b = bundle(2);
        b.eps_uncond = Some(b.eps_cond.clone());
        for lambda in [0.5, 7.5, 100.0] {
            let cfg = GuidanceConfig {
                cfg_scale: lambda,
                ..Default::default()
            };
            assert_eq!(apply_cfg(&b, &cfg).unwrap(), b.eps_cond);
        }
    }

    #[test]
    fn cfg_formula() {
        let b = PredictionBundle::from_predictions(
            from_vec(&[2], vec![1.0, 2.0]).unwrap(),
            Some(from_vec(&[2], vec![0.0, 4.0]).unwrap()),
            None,
        )
        .unwrap();
        let out = apply_cfg(&b, &GuidanceConfig::default()).unwrap();
        assert_eq!(out.as_slice().unwrap(), &[8.5, -13.0]);
    }

    #[test]
    fn pag_identities() {
        let b = bundle(3);
        let off = GuidanceConfig {
            pag_scale: 0.0,
            ..Default::default()
        };
        assert_eq!(apply_pag(&b, &off).unwrap(), b.eps_cond);
        let mut missing = b.clone();
        missing.eps_perturbed = None;
        assert_eq!(apply_pag(&missing, &off).unwrap(), b.eps_cond);
        assert!(apply_pag(&missing, &GuidanceConfig::default()).is_err());
        let mut same = b.clone();
        same.eps_perturbed = Some(b.eps_cond.clone());
        assert_eq!(apply_pag(&same, &GuidanceConfig::default()).unwrap(), b.eps_cond);
    }

    #[test]
    fn defaults_match_published_values() {
        let g = GuidanceConfig::default();
        assert_eq!((g.cfg_scale, g.pag_scale), (7.5, 1.0));
        assert_eq!(g.pag_blocks, PagBlocks::All);
    }

    #[test]
    fn composition_matches_primitives() {
        let b = bundle(4);
        let cfg = GuidanceConfig::default();
        let dir = guidance_direction(&b, &cfg).unwrap();
        let cfg_part = apply_cfg(&b, &cfg).unwrap() - &b.eps_cond;
        let pag_part = apply_pag(&b, &cfg).unwrap() - &b.eps_cond;
        let expected = cfg_part + pag_part;
        assert!(crate::tensor::max_abs_diff(&dir, &expected) < 1e-12);
    }

    #[test]
    fn perturbed_attention_returns_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = randn(&[3, 4], &mut rng).into_dimensionality().unwrap();
        let k = randn(&[3, 4], &mut rng).into_dimensionality().unwrap();
        let v: Array2<f64> = randn(&[3, 2], &mut rng).into_dimensionality().unwrap();
        assert_eq!(perturb_self_attention(&q, &k, &v).unwrap(), v);
        let bad_k = Array2::<f64>::zeros((3, 5));
        assert!(perturb_self_attention(&q, &bad_k, &v).is_err());
    }

    #[test]
    fn perturbation_changes_output_for_non_identity_map() {
        // Two tokens with an asymmetric attention map.
        let q = array![[2.0, 0.0], [0.0, 1.0]];
        let k = array![[0.0, 1.0], [1.0, 0.0]];
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let a = attention_map(&q, &k);
        assert!((a[[0, 1]] - a[[1, 0]]).abs() > 1e-3);
        let sa = self_attention(&q, &k, &v).unwrap();
        let psa = perturb_self_attention(&q, &k, &v).unwrap();
        assert!((&sa - &psa).iter().any(|d| d.abs() > 1e-3));
    }

    #[test]
    fn constant_value_rows_are_unaffected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q: Array2<f64> = randn(&[4, 3], &mut rng).into_dimensionality().unwrap();
        let k: Array2<f64> = randn(&[4, 3], &mut rng).into_dimensionality().unwrap();
        let v = Array2::from_shape_fn((4, 2), |(_, j)| j as f64 + 0.5);
        let sa = self_attention(&q, &k, &v).unwrap();
        let psa = perturb_self_attention(&q, &k, &v).unwrap();
        assert!((&sa - &psa).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn cfg_is_linear() {
        let b = bundle(7);
        let cfg = GuidanceConfig::default();
        let scaled = PredictionBundle::from_predictions(
            &b.eps_cond * 3.0,
            b.eps_uncond.as_ref().map(|u| u * 3.0),
            None,
        )
        .unwrap();
        let lhs = apply_cfg(&scaled, &cfg).unwrap();
        let rhs = apply_cfg(&b, &cfg).unwrap() * 3.0;
        assert!(crate::tensor::max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn pag_blocks_parse() {
        #[derive(Deserialize)]
        struct W {
            b: PagBlocks,
        }
        let all: W = toml::from_str("b = \"all\"").unwrap();
        assert_eq!(all.b, PagBlocks::All);
        let named: W = toml::from_str("b = [\"sa0\"]").unwrap();
        assert!(named.b.contains("sa0") && !named.b.contains("sa1"));
        assert!(toml::from_str::<W>("b = \"some\"").is_err());
    }
}
