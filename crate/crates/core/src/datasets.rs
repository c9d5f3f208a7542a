//! Labelled sample sources for toy-denoiser training.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::MixtureSpec;

/// One training draw: the sample, its prompt label, and a companion image
/// from the same mode used as the visual prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub companion: Vec<f64>,
}

pub trait SampleSource: Send + Sync {
    fn dim(&self) -> usize;
    fn classes(&self) -> usize;
    fn draw(&self, rng: &mut dyn RngCore) -> Sample;
}

/// Gaussian mixture with one prompt label per mode.
///
/// With probability `purity` a sample labelled `c` is drawn from mode `c`,
/// otherwise from a uniformly chosen mode. Labels are uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDataset {
    pub mixture: MixtureSpec,
    pub purity: f64,
}

impl MixtureDataset {
    pub const DEFAULT_PURITY: f64 = 0.1;

    pub fn new(mixture: MixtureSpec, purity: f64) -> Result<Self> {
        mixture.validate()?;
        if !(0.0..=1.0).contains(&purity) {
            return Err(Error::InvalidArgument(format!("purity must lie in [0, 1], got {purity}")));
        }
        if mixture.weights.iter().any(|w| (w - 1.0 / mixture.len() as f64).abs() > 1e-12) {
            return Err(Error::InvalidArgument("labelled mixtures need equal mode weights".into()));
        }
        Ok(Self { mixture, purity })
    }

    pub fn standard() -> Self {
        Self {
            mixture: MixtureSpec::four_mode(),
            purity: Self::DEFAULT_PURITY,
        }
    }

    /// Mode weights of the distribution conditioned on label `c`.
    pub fn class_weights(&self, c: usize) -> Result<Vec<f64>> {
        let k = self.mixture.len();
        if c >= k {
            return Err(Error::InvalidArgument(format!("label {c} outside {k} classes")));
        }
        let rest = (1.0 - self.purity) / k as f64;
        Ok((0..k).map(|i| rest + if i == c { self.purity } else { 0.0 }).collect())
    }

    pub fn class_mixture(&self, c: usize) -> Result<MixtureSpec> {
        let mut w = self.class_weights(c)?;
        // Renormalize against rounding so validation's 1e-12 sum check holds.
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        self.mixture.reweighted(w)
    }

    fn around(&self, k: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        self.mixture.modes[k]
            .iter()
            .map(|m| m + self.mixture.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

impl SampleSource for MixtureDataset {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn classes(&self) -> usize {
        self.mixture.len()
    }

    fn draw(&self, rng: &mut dyn RngCore) -> Sample {
        let k = self.mixture.len();
        let label = rng.random_range(0..k);
        let mode = if rng.random::<f64>() < self.purity {
            label
        } else {
            rng.random_range(0..k)
        };
        Sample {
            x: self.around(mode, rng),
            label,
            companion: self.around(mode, rng),
        }
    }
}

/// A fixed pool of labelled images; companions are other pool members with
/// the same label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePool {
    images: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
    dim: usize,
}

impl ImagePool {
    pub fn new(images: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::InvalidArgument("image pool needs one label per image".into()));
        }
        let dim = images[0].len();
        if images.iter().any(|i| i.len() != dim) {
            return Err(Error::InvalidArgument("image pool entries must share a size".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            images,
            labels,
            classes,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl SampleSource for ImagePool {
    fn dim(&self) -> usize {
        self.dim
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn draw(&self, rng: &mut dyn RngCore) -> Sample {
        let i = rng.random_range(0..self.images.len());
        let label = self.labels[i];
        let same: Vec<usize> = (0..self.images.len()).filter(|&j| self.labels[j] == label).collect();
        let j = same[rng.random_range(0..same.len())];
        Sample {
            x: self.images[i].clone(),
            label,
            companion: self.images[j].clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn class_weights_sum_to_one() {
        let d = MixtureDataset::new(MixtureSpec::four_mode(), 0.3).unwrap();
        let w = d.class_weights(1).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w[1] > w[0]);
        assert!(d.class_weights(4).is_err());
    }

    #[test]
    fn pure_labels_stay_in_mode() {
        let d = MixtureDataset::new(MixtureSpec::four_mode(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let s = d.draw(&mut rng);
            assert_eq!(d.mixture.nearest_mode(&s.x).0, s.label);
            assert_eq!(d.mixture.nearest_mode(&s.companion).0, s.label);
        }
    }

    #[test]
    fn pool_companions_share_label() {
        let pool = ImagePool::new(vec![vec![0.0], vec![1.0], vec![2.0]], vec![0, 1, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = pool.draw(&mut rng);
            assert_eq!(s.x[0] == 1.0, s.label == 1);
            assert_eq!(s.companion[0] == 1.0, s.label == 1);
        }
        assert_eq!(pool.classes(), 2);
    }
}
