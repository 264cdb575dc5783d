//! Whole-page character recognition: a residual U-Net predicts, for every
//! pixel, whether a character is present and (where one is) which class it
//! belongs to; DBSCAN collapses the per-pixel predictions into one point per
//! character.

pub mod augmentation;
pub mod corpus;
pub mod evaluation;
pub mod model;
pub mod postprocess;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use model::{KuroNet, ModelConfig};
pub use scalar::Scalar;
pub use tensor::{OpGradient, Tensor, TensorError};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

pub type KuroNet32 = KuroNet<f32>;
pub type KuroNet64 = KuroNet<f64>;
