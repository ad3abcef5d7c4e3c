//! Dense tensors, tape-based reverse-mode differentiation, Adam and a
//! counter-based random source.
//!
//! Everything here is generic over [`Scalar`], which is implemented for
//! `f32` and `f64`. The rest of the crate runs on `f64`.

mod adam;
mod ops;
mod rng;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub use adam::AdamState;
pub use ops::{activation, add_bias, matmul, mse, row_squared_distance, Activation};
pub use rng::Rng;
pub use tape::{Gradients, Reduce, Tape, Var};
pub use tensor::Tensor;

/// Real scalar usable by every numeric routine in the crate.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossless-enough conversion from an `f64` literal or sample.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
