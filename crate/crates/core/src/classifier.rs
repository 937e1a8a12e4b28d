//! Softmax linear heads: the plain stage-1 head and the prototype-initialized adaptive head.

use serde::{Deserialize, Serialize};

use crate::episodes::Label;
use crate::error::{Error, Result};
use crate::numerics::tensor::linalg;
use crate::numerics::{ParamSet, Scalar, Tensor};

pub const NUM_CLASSES: usize = 2;
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// `softmax(W v + b)` over the two classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<T> {
    /// `NUM_CLASSES × width`, row `k` scores class `k`.
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// Class probabilities and the predicted class (ties go to class 0, troll).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    pub probs: [T; NUM_CLASSES],
    pub label: Label,
}

impl LinearHead<f64> {
    /// Small random weights, zero bias.
    pub fn init(width: usize, seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = (6.0 / (width + NUM_CLASSES) as f64).sqrt();
        let w = (0..NUM_CLASSES * width).map(|_| rng.gen_range(-a..a)).collect();
        Ok(LinearHead { w: Tensor::matrix(NUM_CLASSES, width, w)?, b: Tensor::zeros(&[NUM_CLASSES]) })
    }
}

impl<T: Scalar> LinearHead<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        let (k, _) = w.dims2()?;
        if k != NUM_CLASSES || b.shape() != [NUM_CLASSES] {
            return Err(Error::config(format!(
                "head needs {NUM_CLASSES} rows and bias, got {:?} / {:?}",
                w.shape(),
                b.shape()
            )));
        }
        Ok(LinearHead { w, b })
    }

    pub fn width(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn logits(&self, v: &[T]) -> Result<[T; NUM_CLASSES]> {
        if v.len() != self.width() {
            return Err(Error::config(format!(
                "representation width {} does not match head width {}",
                v.len(),
                self.width()
            )));
        }
        let b = self.b.data();
        Ok([
            linalg::dot(self.w.row(0), v) + b[0],
            linalg::dot(self.w.row(1), v) + b[1],
        ])
    }

    /// Gradients of the head parameters and of `v` given `d logits`.
    pub fn backward(&self, v: &[T], d_logits: &[T; NUM_CLASSES]) -> (ParamSet<T>, Vec<T>) {
        let width = self.width();
        let mut dw = vec![T::zero(); NUM_CLASSES * width];
        let mut dv = vec![T::zero(); width];
        for k in 0..NUM_CLASSES {
            let row = self.w.row(k);
            for j in 0..width {
                dw[k * width + j] = d_logits[k] * v[j];
                dv[j] = dv[j] + d_logits[k] * row[j];
            }
        }
        let mut g = ParamSet::new();
        g.insert(HEAD_W, Tensor::matrix(NUM_CLASSES, width, dw).expect("head grad shape"), true);
        g.insert(HEAD_B, Tensor::vector(d_logits.to_vec()).expect("bias grad shape"), true);
        (g, dv)
    }

    pub fn to_params(&self) -> ParamSet<T> {
        let mut p = ParamSet::new();
        p.insert(HEAD_W, self.w.clone(), true);
        p.insert(HEAD_B, self.b.clone(), true);
        p
    }

    pub fn from_params(p: &ParamSet<T>) -> Result<Self> {
        Self::new(p.get(HEAD_W)?.clone(), p.get(HEAD_B)?.clone())
    }

    pub fn cast<S: Scalar>(&self, f: impl Fn(T) -> S) -> LinearHead<S> {
        LinearHead { w: self.w.map(&f), b: self.b.map(&f) }
    }
}

/// Class probabilities and argmax (ties → troll).
pub fn head_forward<T: Scalar>(v: &[T], head: &LinearHead<T>) -> Result<HeadOutput<T>> {
    let logits = head.logits(v)?;
    let p = linalg::softmax(&logits);
    Ok(HeadOutput { probs: [p[0], p[1]], label: argmax_label(&logits) })
}

pub(crate) fn argmax_label<T: Scalar>(logits: &[T; NUM_CLASSES]) -> Label {
    if logits[1] > logits[0] {
        Label::NonTroll
    } else {
        Label::Troll
    }
}

/// Campaign head seeded from support-set class means.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveHead<T> {
    pub head: LinearHead<T>,
    /// Class means used at initialization, indexed by class.
    pub prototypes: [Vec<T>; NUM_CLASSES],
}

/// Rows of `W` are the class means `μ_k` and `b_k = -½‖μ_k‖²`, so the initial
/// argmax equals the nearest-mean rule.
pub fn prototype_init<T: Scalar>(support: &[(Vec<T>, Label)]) -> Result<AdaptiveHead<T>> {
    let width = support
        .first()
        .map(|(v, _)| v.len())
        .ok_or_else(|| Error::input("empty support set"))?;
    let mut sums = [vec![T::zero(); width], vec![T::zero(); width]];
    let mut counts = [0usize; NUM_CLASSES];
    for (v, y) in support {
        if v.len() != width {
            return Err(Error::config("support representations differ in width"));
        }
        let k = y.index();
        linalg::add_assign(&mut sums[k], v);
        counts[k] += 1;
    }
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::input(format!("support set has no {} examples", Label::from_index(k))));
        }
    }
    let means: [Vec<T>; NUM_CLASSES] = [0, 1].map(|k| {
        let inv = T::lit(1.0 / counts[k] as f64);
        sums[k].iter().map(|&s| s * inv).collect()
    });
    let mut w = Vec::with_capacity(NUM_CLASSES * width);
    let mut b = Vec::with_capacity(NUM_CLASSES);
    for mu in &means {
        w.extend_from_slice(mu);
        b.push(-T::lit(0.5) * linalg::dot(mu, mu));
    }
    Ok(AdaptiveHead {
        head: LinearHead::new(Tensor::matrix(NUM_CLASSES, width, w)?, Tensor::vector(b)?)?,
        prototypes: means,
    })
}

/// Serialized head with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadCheckpoint {
    pub campaign_id: Option<String>,
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub prototypes: Option<Vec<Vec<f64>>>,
    pub steps: usize,
}

impl AdaptiveHead<f64> {
    pub fn to_checkpoint(&self, campaign_id: Option<&str>, steps: usize) -> HeadCheckpoint {
        HeadCheckpoint {
            campaign_id: campaign_id.map(str::to_string),
            w: (0..NUM_CLASSES).map(|k| self.head.w.row(k).to_vec()).collect(),
            b: self.head.b.data().to_vec(),
            prototypes: Some(self.prototypes.to_vec()),
            steps,
        }
    }

    pub fn from_checkpoint(c: &HeadCheckpoint) -> Result<Self> {
        let width = c.w.first().map_or(0, Vec::len);
        if c.w.len() != NUM_CLASSES || width == 0 {
            return Err(Error::input("head checkpoint needs two weight rows"));
        }
        let head = LinearHead::new(
            Tensor::matrix(NUM_CLASSES, width, c.w.concat())?,
            Tensor::vector(c.b.clone())?,
        )?;
        let prototypes = match &c.prototypes {
            Some(p) if p.len() == NUM_CLASSES => [p[0].clone(), p[1].clone()],
            _ => [vec![0.0; width], vec![0.0; width]],
        };
        Ok(AdaptiveHead { head, prototypes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identity_head() {
        let h = LinearHead::new(Tensor::matrix(2, 2, vec![1.0f64, 0.0, 0.0, 1.0]).unwrap(), Tensor::zeros(&[2])).unwrap();
        let out = head_forward(&[2.0, 0.0], &h).unwrap();
        assert_eq!(out.label, Label::Troll);
        assert!(out.probs[0] > 0.5);
        assert!((out.probs[0] + out.probs[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_input_ties_to_troll() {
        let h = LinearHead::<f64>::init(3, 1).unwrap();
        let out = head_forward(&[0.0; 3], &h).unwrap();
        assert_eq!(out.probs, [0.5, 0.5]);
        assert_eq!(out.label, Label::Troll);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let h = LinearHead::<f64>::init(3, 1).unwrap();
        assert!(matches!(head_forward(&[0.0; 4], &h), Err(Error::Config(_))));
    }

    #[test]
    fn probabilities_match_direct_softmax() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let h = LinearHead::<f64>::init(6, seed).unwrap();
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let out = head_forward(&v, &h).unwrap();
            let z: Vec<f64> = (0..2)
                .map(|k| (0..6).map(|j| h.w.row(k)[j] * v[j]).sum::<f64>() + h.b.data()[k])
                .collect();
            let p0 = 1.0 / (1.0 + (z[1] - z[0]).exp());
            assert!((out.probs[0] - p0).abs() < 1e-12);
            assert!((out.probs[1] - (1.0 - p0)).abs() < 1e-12);
        }
    }

    #[test]
    fn prototype_init_hand_example() {
        let support = vec![(vec![1.0, 0.0], Label::Troll), (vec![0.0, 1.0], Label::NonTroll)];
        let ah = prototype_init(&support).unwrap();
        assert_eq!(ah.head.w.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(ah.head.b.data(), &[-0.5, -0.5]);
        assert_eq!(head_forward(&[0.9, 0.2], &ah.head).unwrap().label, Label::Troll);
    }

    #[test]
    fn duplicates_weight_the_mean() {
        let a = prototype_init(&[
            (vec![1.0, 0.0], Label::Troll),
            (vec![1.0, 0.0], Label::Troll),
            (vec![4.0, 3.0], Label::Troll),
            (vec![0.0, 1.0], Label::NonTroll),
        ])
        .unwrap();
        assert_eq!(a.prototypes[0], vec![2.0, 1.0]);
    }

    #[test]
    fn missing_class_rejected() {
        let r = prototype_init(&[(vec![1.0], Label::Troll)]);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let h = LinearHead::<f64>::init(4, 2).unwrap();
        let v = [0.3, -0.2, 1.1, 0.5];
        let logits = h.logits(&v).unwrap();
        let (_, g) = crate::numerics::loss_slice(&logits, 1).unwrap();
        let (grads, dv) = h.backward(&v, &[g[0], g[1]]);
        let loss = |p: &ParamSet<f64>| {
            let h = LinearHead::from_params(p)?;
            Ok(crate::numerics::loss_slice(&h.logits(&v)?, 1)?.0)
        };
        let numeric = crate::numerics::finite_diff_grad(loss, &h.to_params(), 1e-5).unwrap();
        assert!(crate::numerics::GradReport::compare(&grads, &numeric, 1e-6, 1e-5).unwrap().pass);
        for j in 0..4 {
            let mut hi = v;
            let mut lo = v;
            hi[j] += 1e-6;
            lo[j] -= 1e-6;
            let f = |x: &[f64]| crate::numerics::loss_slice(&h.logits(x).unwrap(), 1).unwrap().0;
            assert!(((f(&hi) - f(&lo)) / 2e-6 - dv[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn nearest_mean_agreement_on_gaussian_supports() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let dim = 8;
        let sample = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| StandardNormal.sample(rng)).collect()
        };
        let support: Vec<(Vec<f64>, Label)> = (0..10)
            .map(|i| (sample(&mut rng), if i < 5 { Label::Troll } else { Label::NonTroll }))
            .collect();
        let ah = prototype_init(&support).unwrap();
        for _ in 0..1000 {
            let q = sample(&mut rng);
            let d0: f64 = q.iter().zip(&ah.prototypes[0]).map(|(a, b)| (a - b).powi(2)).sum();
            let d1: f64 = q.iter().zip(&ah.prototypes[1]).map(|(a, b)| (a - b).powi(2)).sum();
            let want = if d1 < d0 { Label::NonTroll } else { Label::Troll };
            assert_eq!(head_forward(&q, &ah.head).unwrap().label, want);
        }
    }
}
