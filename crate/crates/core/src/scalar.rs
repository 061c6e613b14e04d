//! Scalar abstraction for the numeric core.
//!
//! Model math (tape, transducer, decoding, weak-supervision losses) is
//! generic over [`Real`]; the simulation layer pins [`Scalar`] = `f64` so
//! that finite-difference checks and reproducibility contracts hold at
//! full precision.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable throughout the numeric core.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for literals and config values.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Default scalar for simulation runs.
pub type Scalar = f64;
