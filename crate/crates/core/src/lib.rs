//! Representation GAN: an autoencoder trained through two adversarial
//! cycles, data → latent → data (x-Rep-x) and latent → data → latent
//! (Rep-x-Rep), over a disentangled latent code of a categorical slot `c`,
//! a continuous slot `s` and a noise slot `n`.
//!
//! The numerical core is generic over [`Scalar`]; the aliases below fix it
//! to `f32` (training default) or `f64` (gradient checks).

pub mod autodiff;
pub mod data;
pub mod entropy;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod latent;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use latent::{LatentConfig, Slot};
pub use losses::{LossReport, Phase};
pub use networks::ArchConfig;
pub use rng::Stream;
pub use scalar::Scalar;
pub use training::{ModelKind, TrainConfig};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ModelParams32 = networks::ModelParams<f32>;
pub type ModelParams64 = networks::ModelParams<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type TrainState64 = training::TrainState<f64>;
pub type Optimizer32 = optim::Optimizer<f32>;
pub type Optimizer64 = optim::Optimizer<f64>;
