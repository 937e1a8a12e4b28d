use serde::{Deserialize, Serialize};

use crate::episodes::UserRecord;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Numeric per-user features appended to the encoder output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxFeature {
    /// Total images attached to the user's prepared posts.
    ImageCount,
}

/// Named scalars for one user, in configured order.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxFeatures {
    pub values: Vec<(AuxFeature, f64)>,
}

impl AuxFeatures {
    pub fn empty() -> Self {
        AuxFeatures { values: Vec::new() }
    }

    pub fn extract(user: &UserRecord, order: &[AuxFeature]) -> Result<Self> {
        let values = order
            .iter()
            .map(|&f| {
                let v = match f {
                    AuxFeature::ImageCount => user.posts.iter().map(|p| p.image_count as f64).sum(),
                };
                (f, v)
            })
            .collect::<Vec<_>>();
        let out = AuxFeatures { values };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|(_, v)| !v.is_finite()) {
            return Err(Error::numeric("non-finite auxiliary feature"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `v` followed by the auxiliary values.
pub fn concat_aux<T: Scalar>(v: &Tensor<T>, aux: &AuxFeatures) -> Result<Tensor<T>> {
    aux.validate()?;
    let mut data = v.data().to_vec();
    data.extend(aux.values.iter().map(|&(_, x)| T::lit(x)));
    Tensor::vector(data)
}
