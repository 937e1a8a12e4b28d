//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::numerics::ParamSet;

/// Central-difference estimate of `∂loss/∂θ` for every trainable scalar.
///
/// Non-trainable paths are absent from the result.
pub fn finite_diff_grad<F>(loss_fn: F, params: &ParamSet<f64>, epsilon: f64) -> Result<ParamSet<f64>>
where
    F: Fn(&ParamSet<f64>) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::input("finite-difference epsilon must be positive"));
    }
    let mut probe = params.clone();
    let mut grads = ParamSet::new();
    let paths: Vec<String> = params.trainable_paths().map(str::to_string).collect();
    for path in paths {
        let mut g = params.get(&path)?.zeros_like();
        for i in 0..g.len() {
            let orig = params.get(&path)?.data()[i];
            probe.get_mut(&path)?.data_mut()[i] = orig + epsilon;
            let hi = loss_fn(&probe)?;
            probe.get_mut(&path)?.data_mut()[i] = orig - epsilon;
            let lo = loss_fn(&probe)?;
            probe.get_mut(&path)?.data_mut()[i] = orig;
            if !hi.is_finite() || !lo.is_finite() {
                return Err(Error::numeric(format!("non-finite loss while probing {path}[{i}]")));
            }
            g.data_mut()[i] = (hi - lo) / (2.0 * epsilon);
        }
        grads.insert(path, g, true);
    }
    Ok(grads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathDiff {
    pub path: String,
    pub max_abs_diff: f64,
    /// Largest `|analytic - numeric| / max(abs_tol, rel_tol * |numeric|)`; ≤ 1 passes.
    pub worst_ratio: f64,
}

/// Per-path comparison of analytic and finite-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub paths: Vec<PathDiff>,
    pub pass: bool,
}

impl GradReport {
    /// Each element passes when `|a - n| ≤ max(abs_tol, rel_tol·max(|a|,|n|))`.
    pub fn compare(
        analytic: &ParamSet<f64>,
        numeric: &ParamSet<f64>,
        abs_tol: f64,
        rel_tol: f64,
    ) -> Result<GradReport> {
        let mut paths = Vec::new();
        for (path, n) in numeric.iter() {
            let a = analytic
                .get(path)
                .map_err(|_| Error::input(format!("analytic gradient missing {path}")))?;
            if a.shape() != n.shape() {
                return Err(Error::input(format!("gradient shape mismatch at {path}")));
            }
            let mut max_abs_diff = 0.0f64;
            let mut worst_ratio = 0.0f64;
            for (&x, &y) in a.data().iter().zip(n.data()) {
                let diff = (x - y).abs();
                let tol = abs_tol.max(rel_tol * x.abs().max(y.abs()));
                max_abs_diff = max_abs_diff.max(diff);
                worst_ratio = worst_ratio.max(diff / tol);
            }
            paths.push(PathDiff { path: path.to_string(), max_abs_diff, worst_ratio });
        }
        let pass = paths.iter().all(|p| p.worst_ratio <= 1.0);
        Ok(GradReport { paths, pass })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![3.0]).unwrap(), true);
        let g = finite_diff_grad(|p| Ok(p.get("x")?.data()[0].powi(2)), &p, 1e-4).unwrap();
        assert!((g.get("x").unwrap().data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_zero_gradient() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![3.0, -1.0]).unwrap(), true);
        let g = finite_diff_grad(|_| Ok(42.0), &p, 1e-4).unwrap();
        assert!(g.get("x").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![0.0]).unwrap(), true);
        let r = finite_diff_grad(
            |p| Ok(if p.get("x")?.data()[0] > 0.0 { f64::INFINITY } else { 0.0 }),
            &p,
            1e-4,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn report_flags_mismatch() {
        let mut a = ParamSet::new();
        a.insert("x", Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
        let mut n = a.clone();
        assert!(GradReport::compare(&a, &n, 1e-4, 1e-3).unwrap().pass);
        n.get_mut("x").unwrap().data_mut()[1] = 2.1;
        let r = GradReport::compare(&a, &n, 1e-4, 1e-3).unwrap();
        assert!(!r.pass);
        assert!((r.paths[0].max_abs_diff - 0.1).abs() < 1e-12);
    }
}
