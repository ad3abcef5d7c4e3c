//! Distilling a frozen embedding network into a small student using only
//! synthetic inputs from a frozen generator, with latent re-sampling driven
//! by teacher–student agreement.

pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nets;
pub mod numcore;

pub use error::{Error, Result};
pub use numcore::Scalar;

pub type Tensor64 = numcore::Tensor<f64>;
pub type Tensor32 = numcore::Tensor<f32>;
pub type Tape64 = numcore::Tape<f64>;
pub type AdamState64 = numcore::AdamState<f64>;
pub type Mlp64 = nets::MlpParams<f64>;
pub type Student64 = nets::Student<f64>;
pub type FrozenNet64 = nets::FrozenNet<f64>;
pub type GeneratorStack64 = nets::GeneratorStack<f64>;
