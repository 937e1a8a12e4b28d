use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::linalg;
use crate::numerics::{Activation, ParamSet, Scalar, Tensor};

/// Where in a transformer layer an adapter block sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InsertionPoint {
    /// After the attention output projection, before residual + layer norm.
    Attention,
    /// After the feed-forward sublayer, before residual + layer norm.
    FeedForward,
}

impl InsertionPoint {
    pub const BOTH: [InsertionPoint; 2] = [InsertionPoint::Attention, InsertionPoint::FeedForward];

    fn tag(self) -> &'static str {
        match self {
            InsertionPoint::Attention => "adapter_attn",
            InsertionPoint::FeedForward => "adapter_ffn",
        }
    }
}

/// Path prefix of one adapter block, e.g. `layer1.adapter_ffn`.
pub fn block_key(layer: usize, point: InsertionPoint) -> String {
    format!("layer{layer}.{}", point.tag())
}

/// Block key owning a parameter path (`layer0.adapter_attn.down_w` → `layer0.adapter_attn`).
pub fn block_of_path(path: &str) -> &str {
    path.rsplit_once('.').map_or(path, |(head, _)| head)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub layers: usize,
    pub d_model: usize,
    pub bottleneck: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Half-width of the uniform init for down-projections.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    0.05
}

impl AdapterConfig {
    pub fn new(layers: usize, d_model: usize, bottleneck: usize) -> Self {
        AdapterConfig {
            layers,
            d_model,
            bottleneck,
            activation: Activation::Gelu,
            init_scale: default_init_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("adapter stack needs at least one layer"));
        }
        if self.bottleneck == 0 || self.bottleneck >= self.d_model {
            return Err(Error::config(format!(
                "adapter bottleneck {} must satisfy 0 < m < d = {}",
                self.bottleneck, self.d_model
            )));
        }
        Ok(())
    }

    /// `2·L·(2·d·m + m + d)`.
    pub fn param_count(&self) -> usize {
        let (d, m) = (self.d_model, self.bottleneck);
        2 * self.layers * (2 * d * m + m + d)
    }
}

/// One adapter stack: a residual bottleneck block at both insertion points of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T> {
    pub config: AdapterConfig,
    pub params: ParamSet<T>,
}

/// Borrowed weights of a single block.
#[derive(Clone, Copy, Debug)]
pub struct AdapterBlock<'a, T> {
    pub down_w: &'a [T],
    pub down_b: &'a [T],
    pub up_w: &'a [T],
    pub up_b: &'a [T],
    pub d_model: usize,
    pub bottleneck: usize,
    pub activation: Activation,
}

/// Values saved by [`AdapterBlock::forward_rows`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace<T> {
    pub input: Vec<T>,
    pub pre_act: Vec<T>,
    pub act: Vec<T>,
}

/// Random down-projections, zero up-projections and biases: each block starts as the identity.
pub fn init_shared_adapter(config: &AdapterConfig, seed: u64) -> Result<AdapterParams<f64>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, m) = (config.d_model, config.bottleneck);
    let s = config.init_scale;
    let mut params = ParamSet::new();
    for layer in 0..config.layers {
        for point in InsertionPoint::BOTH {
            let key = block_key(layer, point);
            let down: Vec<f64> = (0..d * m).map(|_| rng.gen_range(-s..=s)).collect();
            params.insert(format!("{key}.down_w"), Tensor::matrix(d, m, down)?, true);
            params.insert(format!("{key}.down_b"), Tensor::zeros(&[m]), true);
            params.insert(format!("{key}.up_w"), Tensor::zeros(&[m, d]), true);
            params.insert(format!("{key}.up_b"), Tensor::zeros(&[d]), true);
        }
    }
    Ok(AdapterParams { config: config.clone(), params })
}

/// Deep copy; later updates to the clone never reach the source.
pub fn clone_adapter<T: Scalar>(adapter: &AdapterParams<T>) -> AdapterParams<T> {
    adapter.clone()
}

impl<T: Scalar> AdapterParams<T> {
    pub fn block(&self, layer: usize, point: InsertionPoint) -> Result<AdapterBlock<'_, T>> {
        let key = block_key(layer, point);
        Ok(AdapterBlock {
            down_w: self.params.get(&format!("{key}.down_w"))?.data(),
            down_b: self.params.get(&format!("{key}.down_b"))?.data(),
            up_w: self.params.get(&format!("{key}.up_w"))?.data(),
            up_b: self.params.get(&format!("{key}.up_b"))?.data(),
            d_model: self.config.d_model,
            bottleneck: self.config.bottleneck,
            activation: self.config.activation,
        })
    }

    /// Keys of all blocks in layer order, attention before feed-forward.
    pub fn block_keys(&self) -> Vec<String> {
        (0..self.config.layers)
            .flat_map(|l| InsertionPoint::BOTH.map(|p| block_key(l, p)))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<S: Scalar>(&self, f: impl Fn(T) -> S) -> AdapterParams<S> {
        AdapterParams { config: self.config.clone(), params: self.params.cast(f) }
    }

    pub fn with_params(&self, params: ParamSet<T>) -> AdapterParams<T> {
        AdapterParams { config: self.config.clone(), params }
    }
}

impl<'a, T: Scalar> AdapterBlock<'a, T> {
    /// `h + Up(act(Down(h)))` for a single vector.
    pub fn forward(&self, h: &[T]) -> Vec<T> {
        self.forward_rows(h.to_vec()).0
    }

    /// Applies the block to each row of `x (r×d)`.
    pub fn forward_rows(&self, x: Vec<T>) -> (Vec<T>, BlockTrace<T>) {
        let (d, m) = (self.d_model, self.bottleneck);
        let r = x.len() / d;
        let mut pre = linalg::matmul(&x, self.down_w, r, d, m);
        linalg::add_row_bias(&mut pre, self.down_b);
        let act: Vec<T> = pre.iter().map(|&z| self.activation.apply(z)).collect();
        let mut out = linalg::matmul(&act, self.up_w, r, m, d);
        linalg::add_row_bias(&mut out, self.up_b);
        linalg::add_assign(&mut out, &x);
        (out, BlockTrace { input: x, pre_act: pre, act })
    }

    /// Returns `d input` and, if `grads` is given, accumulates parameter gradients
    /// into the block's paths under `key`.
    pub fn backward_rows(
        &self,
        trace: &BlockTrace<T>,
        d_out: &[T],
        grads: Option<(&mut ParamSet<T>, &str)>,
    ) -> Result<Vec<T>> {
        let (d, m) = (self.d_model, self.bottleneck);
        let r = d_out.len() / d;
        // d act = d_out · upᵀ
        let d_act = linalg::matmul_nt(d_out, self.up_w, r, d, m);
        let d_pre: Vec<T> = d_act
            .iter()
            .zip(&trace.pre_act)
            .map(|(&g, &z)| g * self.activation.derivative(z))
            .collect();
        if let Some((grads, key)) = grads {
            linalg::matmul_tn_acc(grads.get_mut(&format!("{key}.up_w"))?.data_mut(), &trace.act, d_out, r, m, d);
            linalg::col_sums_acc(grads.get_mut(&format!("{key}.up_b"))?.data_mut(), d_out);
            linalg::matmul_tn_acc(grads.get_mut(&format!("{key}.down_w"))?.data_mut(), &trace.input, &d_pre, r, d, m);
            linalg::col_sums_acc(grads.get_mut(&format!("{key}.down_b"))?.data_mut(), &d_pre);
        }
        let mut d_in = linalg::matmul_nt(&d_pre, self.down_w, r, m, d);
        linalg::add_assign(&mut d_in, d_out);
        Ok(d_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, GradReport};

    #[test]
    fn parameter_count_at_toy_defaults() {
        let cfg = AdapterConfig::new(2, 32, 8);
        assert_eq!(cfg.param_count(), 2208);
        assert_eq!(init_shared_adapter(&cfg, 1).unwrap().num_scalars(), 2208);
    }

    #[test]
    fn bottleneck_must_be_narrower() {
        assert!(matches!(init_shared_adapter(&AdapterConfig::new(2, 8, 8), 0), Err(Error::Config(_))));
    }

    #[test]
    fn fresh_block_is_identity() {
        let a = init_shared_adapter(&AdapterConfig::new(1, 4, 2), 3).unwrap();
        let h = [0.3, -1.2, 4.0, 0.0];
        for point in InsertionPoint::BOTH {
            assert_eq!(a.block(0, point).unwrap().forward(&h), h.to_vec());
        }
    }

    #[test]
    fn same_seed_same_bundle() {
        let cfg = AdapterConfig::new(2, 8, 3);
        assert_eq!(init_shared_adapter(&cfg, 9).unwrap(), init_shared_adapter(&cfg, 9).unwrap());
        assert_ne!(init_shared_adapter(&cfg, 9).unwrap(), init_shared_adapter(&cfg, 10).unwrap());
    }

    #[test]
    fn hand_computed_linear_block() {
        let block = AdapterBlock {
            down_w: &[1.0, 0.0],
            down_b: &[0.0],
            up_w: &[1.0, 0.0],
            up_b: &[0.0, 0.0],
            d_model: 2,
            bottleneck: 1,
            activation: Activation::Identity,
        };
        assert_eq!(block.forward(&[3.0, 4.0]), vec![6.0, 4.0]);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut cfg = AdapterConfig::new(1, 5, 3);
        cfg.init_scale = 0.8;
        let mut a = init_shared_adapter(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let paths: Vec<String> = a.params.paths().map(str::to_string).collect();
        for p in paths {
            for v in a.params.get_mut(&p).unwrap().data_mut() {
                *v = rng.gen_range(-0.7..0.7);
            }
        }
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect(); // 2 rows
        let w: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let key = block_key(0, InsertionPoint::Attention);
        let loss = |params: &ParamSet<f64>| -> Result<f64> {
            let a = a.with_params(params.clone());
            let (out, _) = a.block(0, InsertionPoint::Attention)?.forward_rows(x.clone());
            Ok(linalg::dot(&out, &w))
        };
        let block = a.block(0, InsertionPoint::Attention).unwrap();
        let (_, trace) = block.forward_rows(x.clone());
        let mut grads = a.params.zeros_like();
        let d_in = block.backward_rows(&trace, &w, Some((&mut grads, &key))).unwrap();
        let numeric = finite_diff_grad(loss, &a.params, 1e-5).unwrap();
        let report = GradReport::compare(&grads, &numeric, 1e-4, 1e-3).unwrap();
        assert!(report.pass, "{report:?}");

        // input gradient
        for i in 0..x.len() {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[i] += 1e-5;
            lo[i] -= 1e-5;
            let f = |v: Vec<f64>| linalg::dot(&block.forward_rows(v).0, &w);
            let fd = (f(hi) - f(lo)) / 2e-5;
            assert!((fd - d_in[i]).abs() < 1e-6);
        }
    }
}
