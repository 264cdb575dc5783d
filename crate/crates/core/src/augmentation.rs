//! Input perturbations applied at training time.
//!
//! Mixup here keeps the labels of the dominant page: the mixing weight of
//! the secondary page is drawn from `Beta(alpha, alpha + 1)` and clamped to
//! a small range, so the result is always mostly the labelled page.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::tensor::{Result, TensorError};
use crate::{Scalar, Tensor};

pub const BRIGHTNESS_RANGE: (f64, f64) = (0.9, 1.1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupConfig {
    pub alpha: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub enabled: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            clamp_lo: 0.0,
            clamp_hi: 0.3,
            enabled: true,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(format!("mixup alpha must be positive, got {}", self.alpha));
        }
        if !(0.0 <= self.clamp_lo && self.clamp_lo <= self.clamp_hi && self.clamp_hi <= 1.0) {
            return Err(format!(
                "mixup clamp range [{}, {}] must satisfy 0 <= lo <= hi <= 1",
                self.clamp_lo, self.clamp_hi
            ));
        }
        Ok(())
    }

    pub fn clamp(&self, raw: f64) -> f64 {
        raw.clamp(self.clamp_lo, self.clamp_hi)
    }
}

/// Draws the weight of the secondary page: `Beta(alpha, alpha+1)` clamped
/// into `[clamp_lo, clamp_hi]`.
///
/// The draw happens whether or not mixup is enabled so that enabling it
/// never shifts the rest of the random stream.
pub fn sample_lambda<R: Rng + ?Sized>(config: &MixupConfig, rng: &mut R) -> f64 {
    let beta = Beta::new(config.alpha, config.alpha + 1.0).expect("validated alpha");
    config.clamp(beta.sample(rng))
}

/// `lambda·x1 + (1 − lambda)·x2`, evaluated as `x2 + lambda·(x1 − x2)` so that
/// `lambda = 0` and `x1 == x2` both return `x2` bit for bit.
pub fn mixup<T: Scalar>(x1: &Tensor<T>, x2: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    if x1.shape() != x2.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mixup",
            left: x1.shape().to_vec(),
            right: x2.shape().to_vec(),
        });
    }
    let l = T::of(lambda);
    let data = x1
        .data()
        .iter()
        .zip(x2.data())
        .map(|(&a, &b)| b + l * (a - b))
        .collect();
    Tensor::new(x2.shape(), data)
}

pub fn sample_brightness<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1)
}

/// Scales every pixel by `factor` and clips to `[0, 1]`.
pub fn apply_brightness<T: Scalar>(x: &Tensor<T>, factor: f64) -> Tensor<T> {
    let f = T::of(factor);
    x.map(|v| (v * f).max(T::zero()).min(T::one()))
}

/// Multiplies the page by a factor drawn uniformly from [0.9, 1.1], then clips.
pub fn brightness_jitter<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    apply_brightness(x, sample_brightness(rng))
}
