use rand::RngCore;

use super::{CameraPose, Layout, Renderer, SceneParameters};
use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, from_vec, randn, Tensor};

/// θ is the image itself; the pose is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImageRenderer {
    shape: Vec<usize>,
}

impl LatentImageRenderer {
    pub fn new(shape: Vec<usize>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid image shape {shape:?}")));
        }
        Ok(Self { shape })
    }

    pub fn params_from(&self, image: &Tensor) -> Result<SceneParameters> {
        if image.shape() != self.shape.as_slice() {
            return Err(Error::shape("latent image", &self.shape, image.shape()));
        }
        SceneParameters::new(image.iter().copied().collect(), self.layout())
    }
}

impl Renderer for LatentImageRenderer {
    fn id(&self) -> &str {
        "latent-image"
    }

    fn image_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn layout(&self) -> Layout {
        Layout::from_shapes(&[("image", self.shape.clone())])
    }

    fn init(&self, rng: &mut dyn RngCore, scale: f64) -> SceneParameters {
        let values = randn(&self.shape, rng).iter().map(|v| v * scale).collect();
        SceneParameters::new(values, self.layout()).expect("layout matches shape")
    }

    fn render(&self, theta: &SceneParameters, pose: &CameraPose) -> Result<Tensor> {
        self.check_params(theta)?;
        self.check_pose(pose)?;
        from_vec(&self.shape, theta.values.clone())
    }

    fn backward(&self, theta: &SceneParameters, pose: &CameraPose, grad_image: &Tensor) -> Result<Vec<f64>> {
        let image = self.render(theta, pose)?;
        ensure_same_shape("latent image gradient", &image, grad_image)?;
        Ok(grad_image.iter().copied().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{render_grid, CanonicalView};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_render_and_grid() {
        let r = LatentImageRenderer::new(vec![2, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let theta = r.init(&mut rng, 1.0);
        let pose = CameraPose::canonical(CanonicalView::Front, 0.0);
        let img = r.render(&theta, &pose).unwrap();
        assert_eq!(img.iter().copied().collect::<Vec<_>>(), theta.values);
        let (views, _) = render_grid(&theta, &r, 15.0).unwrap();
        assert!(views.iter().all(|v| *v == img));
        let g = Tensor::from_elem(vec![2, 2, 3], 2.0);
        assert_eq!(r.backward(&theta, &pose, &g).unwrap(), vec![2.0; 12]);
    }
}
