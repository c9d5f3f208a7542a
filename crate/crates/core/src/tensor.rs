//! Dense `f64` tensors used for latents, images and noise.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::shape("tensor construction", &[expected], &[data.len()]));
    }
    Ok(Tensor::from_shape_vec(IxDyn(shape), data).expect("length checked"))
}

pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.sample(StandardNormal))
}

pub fn norm(x: &Tensor) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `‖a − b‖ / ‖b‖`, falling back to the absolute error when `b` is zero.
pub fn rel_l2(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(b);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn ensure_same_shape(context: &str, expected: &Tensor, actual: &Tensor) -> Result<()> {
    if expected.shape() != actual.shape() {
        return Err(Error::shape(context, expected.shape(), actual.shape()));
    }
    Ok(())
}

pub fn ensure_finite(context: &str, x: &Tensor) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(context))
    }
}
