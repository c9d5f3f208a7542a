use crate::backends::{Denoiser, DenoiserCapabilities, DenoiserQuery};
use crate::conditioning::TextCondition;
use crate::datasets::{MixtureDataset, SampleSource};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::oracles::optimal_denoiser;
use crate::tensor::Tensor;

/// Closed-form Bayes-optimal denoiser for a labelled Gaussian mixture.
///
/// Prompt `c` selects the class-conditional mixture of the dataset; the null
/// prompt selects the marginal.
#[derive(Debug, Clone)]
pub struct MixtureDenoiser {
    dataset: MixtureDataset,
    schedule: DiffusionSchedule,
}

impl MixtureDenoiser {
    pub fn new(dataset: MixtureDataset, schedule: DiffusionSchedule) -> Self {
        Self { dataset, schedule }
    }

    /// The four-mode dataset under the default schedule.
    pub fn standard() -> Result<Self> {
        Ok(Self::new(MixtureDataset::standard(), DiffusionSchedule::default()))
    }

    pub fn dataset(&self) -> &MixtureDataset {
        &self.dataset
    }
}

impl Denoiser for MixtureDenoiser {
    fn id(&self) -> &str {
        "mixture-oracle"
    }

    fn capabilities(&self) -> DenoiserCapabilities {
        DenoiserCapabilities {
            supports_visual_condition: false,
            supports_perturbed_attention: false,
            concurrent_queries: true,
            latent_shape: vec![self.dataset.mixture.dim()],
            horizon: self.schedule.horizon(),
            min_timestep: 0,
            visual_tokens: None,
            vocab: Some(self.dataset.classes()),
            attention_blocks: Vec::new(),
        }
    }

    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn evaluate(&self, query: &DenoiserQuery<'_>) -> Result<Tensor> {
        let mixture = match &query.conditions.text {
            TextCondition::Null => self.dataset.mixture.clone(),
            TextCondition::Token(c) => self.dataset.class_mixture(*c)?,
            TextCondition::Embedding(_) | TextCondition::Prompt(_) => {
                return Err(Error::Capability("mixture oracle takes token prompts only".into()))
            }
        };
        optimal_denoiser(query.x, query.t, &mixture, &self.schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::predict;
    use crate::conditioning::ConditionSet;
    use crate::tensor::from_vec;

    #[test]
    fn conditional_and_marginal_differ() {
        let d = MixtureDenoiser::standard().unwrap();
        let x = from_vec(&[2], vec![0.2, 0.1]).unwrap();
        let c = ConditionSet::text(TextCondition::Token(2));
        let a = predict(&d, &DenoiserQuery::new(&x, 500, &c)).unwrap();
        let b = predict(&d, &DenoiserQuery::new(&x, 500, &ConditionSet::null())).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, predict(&d, &DenoiserQuery::new(&x, 500, &c)).unwrap());
    }
}
