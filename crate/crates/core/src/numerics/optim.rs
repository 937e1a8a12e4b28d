use crate::error::Result;
use crate::numerics::{ParamSet, Scalar};

/// Adam with a linear warmup over the first `warmup_steps`, constant afterwards.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    step: usize,
    m: ParamSet<T>,
    v: ParamSet<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, warmup_steps: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        if self.warmup_steps == 0 || self.step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (self.step + 1) as f64 / self.warmup_steps as f64
        }
    }

    /// Updates trainable tensors of `params` in place.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        params.check_grads(grads)?;
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = T::lit(lr);
        let eps = T::lit(self.eps);
        let paths: Vec<String> = params.trainable_paths().map(str::to_string).collect();
        for path in paths {
            let g = grads.get(&path)?.data();
            let m = self.m.get_mut(&path)?.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let v = self.v.get_mut(&path)?.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let m = self.m.get(&path)?.data();
            let v = self.v.get(&path)?.data();
            let p = params.get_mut(&path)?.data_mut();
            for ((pi, &mi), &vi) in p.iter_mut().zip(m).zip(v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
