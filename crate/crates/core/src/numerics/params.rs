use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Named parameter tensors plus the set of paths an update may touch.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    trainable: BTreeSet<String>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { tensors: BTreeMap::new(), trainable: BTreeSet::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        let path = path.into();
        if trainable {
            self.trainable.insert(path.clone());
        } else {
            self.trainable.remove(&path);
        }
        self.tensors.insert(path, tensor);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::NotFound(format!("parameter {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::NotFound(format!("parameter {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn trainable_paths(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        self.trainable.contains(path)
    }

    pub fn set_trainable(&mut self, path: &str, trainable: bool) -> Result<()> {
        if !self.tensors.contains_key(path) {
            return Err(Error::NotFound(format!("parameter {path}")));
        }
        if trainable {
            self.trainable.insert(path.to_string());
        } else {
            self.trainable.remove(path);
        }
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        if trainable {
            self.trainable = self.tensors.keys().cloned().collect();
        } else {
            self.trainable.clear();
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same paths and trainable mask, all values zero.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.zeros_like())).collect(),
            trainable: self.trainable.clone(),
        }
    }

    /// Converts every value into another scalar type, keeping the mask.
    pub fn cast<S: Scalar>(&self, f: impl Fn(T) -> S) -> ParamSet<S> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.map(&f))).collect(),
            trainable: self.trainable.clone(),
        }
    }

    /// Moves all tensors of `other` into `self`.
    pub fn extend(&mut self, other: ParamSet<T>) {
        for (k, v) in other.tensors {
            let trainable = other.trainable.contains(&k);
            self.insert(k, v, trainable);
        }
    }

    /// `self += scale * other` over the paths present in both.
    pub fn axpy(&mut self, scale: T, other: &ParamSet<T>) {
        for (k, v) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(k) {
                v.axpy(scale, o);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in self.tensors.values_mut() {
            v.scale(s);
        }
    }

    /// One plain gradient-descent step: `new = old - lr * grad` on trainable paths.
    ///
    /// Paths outside the trainable mask are copied untouched, whatever `grads` holds.
    pub fn sgd_step(&self, grads: &ParamSet<T>, lr: T) -> Result<ParamSet<T>> {
        let mut out = self.clone();
        out.sgd_step_in_place(grads, lr)?;
        Ok(out)
    }

    pub fn sgd_step_in_place(&mut self, grads: &ParamSet<T>, lr: T) -> Result<()> {
        self.check_grads(grads)?;
        for path in &self.trainable {
            let g = &grads.tensors[path];
            self.tensors.get_mut(path).expect("mask subset of map").axpy(-lr, g);
        }
        Ok(())
    }

    /// Errors unless `grads` covers every trainable path with a matching shape.
    pub fn check_grads(&self, grads: &ParamSet<T>) -> Result<()> {
        for path in &self.trainable {
            let g = grads
                .tensors
                .get(path)
                .ok_or_else(|| Error::input(format!("missing gradient for trainable path {path}")))?;
            if g.shape() != self.tensors[path].shape() {
                return Err(Error::input(format!(
                    "gradient shape {:?} does not match parameter {path} {:?}",
                    g.shape(),
                    self.tensors[path].shape()
                )));
            }
        }
        Ok(())
    }

    /// Concatenated values of the trainable tensors, in path order.
    pub fn flatten_trainable(&self) -> Vec<T> {
        self.trainable
            .iter()
            .flat_map(|p| self.tensors[p].data().iter().copied())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Euclidean distance over all shared paths.
    pub fn l2_distance(&self, other: &ParamSet<T>) -> T {
        let mut acc = T::zero();
        for (k, v) in &self.tensors {
            if let Some(o) = other.tensors.get(k) {
                for (&a, &b) in v.data().iter().zip(o.data()) {
                    acc = acc + (a - b) * (a - b);
                }
            }
        }
        acc.sqrt()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            params: self
                .tensors
                .iter()
                .map(|(path, t)| CheckpointEntry {
                    path: path.clone(),
                    shape: t.shape().to_vec(),
                    trainable: self.trainable.contains(path),
                    values: t.data().iter().map(|v| v.value()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::input(format!("unknown checkpoint format {}", ckpt.format)));
        }
        let mut out = ParamSet::new();
        for entry in &ckpt.params {
            let values = entry.values.iter().map(|&v| T::lit(v)).collect();
            out.insert(entry.path.clone(), Tensor::new(entry.shape.clone(), values)?, entry.trainable);
        }
        Ok(out)
    }

    /// Serialized JSON checkpoint bytes. Float formatting is shortest round-trip,
    /// so `from_json(to_json(p)) == p` value-exactly.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "metatroll-params/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub params: Vec<CheckpointEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::vector(vec![v]).unwrap()
    }

    #[test]
    fn sgd_step_scalar() {
        let mut p = ParamSet::new();
        p.insert("psi", scalar(1.0), true);
        let mut g = ParamSet::new();
        g.insert("psi", scalar(2.0), true);
        let out = p.sgd_step(&g, 0.1).unwrap();
        assert!((out.get("psi").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_bit_exact_noop() {
        let mut p = ParamSet::new();
        p.insert("psi", Tensor::vector(vec![0.1f64, -0.3, 1e-300]).unwrap(), true);
        let mut g = p.zeros_like();
        g.get_mut("psi").unwrap().data_mut().copy_from_slice(&[5.0, -2.0, 7.0]);
        let out = p.sgd_step(&g, 0.0).unwrap();
        for (a, b) in out.get("psi").unwrap().data().iter().zip(p.get("psi").unwrap().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn frozen_path_untouched() {
        let mut p = ParamSet::new();
        p.insert("psi", scalar(1.0), true);
        p.insert("phi", scalar(3.0), false);
        let mut g = ParamSet::new();
        g.insert("psi", scalar(1.0), true);
        g.insert("phi", scalar(100.0), true);
        let out = p.sgd_step(&g, 0.5).unwrap();
        assert_eq!(out.get("phi").unwrap().data()[0].to_bits(), 3.0f64.to_bits());
    }

    #[test]
    fn missing_gradient_is_input_error() {
        let mut p = ParamSet::new();
        p.insert("psi", scalar(1.0), true);
        let g = ParamSet::<f64>::new();
        assert!(matches!(p.sgd_step(&g, 0.1), Err(Error::Input(_))));
    }

    #[test]
    fn json_round_trip_is_value_exact() {
        let mut p = ParamSet::new();
        p.insert(
            "w",
            Tensor::matrix(2, 2, vec![0.1, 1.0 / 3.0, -2.5e-17, std::f64::consts::PI]).unwrap(),
            true,
        );
        p.insert("b", scalar(f64::MIN_POSITIVE), false);
        let back = ParamSet::<f64>::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        for (x, y) in back.get("w").unwrap().data().iter().zip(p.get("w").unwrap().data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
