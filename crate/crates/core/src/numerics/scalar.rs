use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Real scalar the model and optimizers are generic over.
///
/// Implemented for `f32`, `f64` and [`Dual`](super::Dual), the latter being
/// how Hessian-vector products are obtained from the ordinary gradient code.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {
    /// Converts an `f64` literal into this scalar type.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    /// Primal value as `f64` (drops any tangent part).
    fn value(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl<T> Scalar for T where T: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {}
