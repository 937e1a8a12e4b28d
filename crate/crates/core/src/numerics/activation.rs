use serde::{Deserialize, Serialize};

use crate::numerics::Scalar;

/// Pointwise nonlinearity used in feed-forward sublayers and adapter bottlenecks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation of GELU.
    #[default]
    Gelu,
    Identity,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Gelu => {
                let half = T::lit(0.5);
                let inner = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
                half * x * (T::one() + inner.tanh())
            }
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Gelu => {
                let half = T::lit(0.5);
                let c = T::lit(SQRT_2_OVER_PI);
                let a = T::lit(GELU_CUBIC);
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
            }
        }
    }
}
