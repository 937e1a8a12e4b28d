//! Post-LN transformer encoder with optional adapter blocks and CLS pooling.
//!
//! Layer layout (per layer, `x` the input rows):
//!
//! ```text
//! a  = adapter_attn(MultiHeadAttention(x))
//! h  = LN1(x + dropout(a))
//! f  = adapter_ffn(W2 · act(W1 · h))
//! out = LN2(h + dropout(f))
//! ```
//!
//! Only the CLS row leaves the last layer, so that layer computes queries,
//! feed-forward and norms for row 0 alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::{block_key, AdapterParams, BlockTrace, InsertionPoint};
use crate::error::{Error, Result};
use crate::numerics::tensor::linalg;
use crate::numerics::{Activation, ParamSet, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default)]
    pub activation: Activation,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl EncoderConfig {
    /// Toy defaults: 2 layers, width 32, 2 heads, feed-forward 64, 320 positions.
    pub fn toy(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            max_len: 320,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            n_layers: 2,
            ln_eps: default_ln_eps(),
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("encoder needs at least one layer"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < crate::encoder::RESERVED_TOKENS || self.max_len == 0 || self.d_ff == 0 {
            return Err(Error::config("vocab_size, max_len and d_ff must be positive"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// The frozen-after-stage-1 encoder weights `Φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
}

impl EncoderParams<f64> {
    /// Xavier-uniform projections, N(0, 0.1²) embeddings, unit layer-norm gains.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, ff) = (config.d_model, config.d_ff);
        let mut p = ParamSet::new();
        let emb = Normal::new(0.0, 0.1).expect("valid normal");
        let normal = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| emb.sample(rng)).collect() };
        p.insert("emb.tok", Tensor::matrix(config.vocab_size, d, normal(config.vocab_size * d, &mut rng))?, true);
        p.insert("emb.pos", Tensor::matrix(config.max_len, d, normal(config.max_len * d, &mut rng))?, true);
        p.insert("emb.ln.gamma", Tensor::full(&[d], 1.0), true);
        p.insert("emb.ln.beta", Tensor::zeros(&[d]), true);
        let xavier = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Result<Tensor<f64>> {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
        };
        for l in 0..config.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("layer{l}.attn.{w}"), xavier(d, d, &mut rng)?, true);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                p.insert(format!("layer{l}.attn.{b}"), Tensor::zeros(&[d]), true);
            }
            p.insert(format!("layer{l}.ffn.w1"), xavier(d, ff, &mut rng)?, true);
            p.insert(format!("layer{l}.ffn.b1"), Tensor::zeros(&[ff]), true);
            p.insert(format!("layer{l}.ffn.w2"), xavier(ff, d, &mut rng)?, true);
            p.insert(format!("layer{l}.ffn.b2"), Tensor::zeros(&[d]), true);
            for ln in ["ln1", "ln2"] {
                p.insert(format!("layer{l}.{ln}.gamma"), Tensor::full(&[d], 1.0), true);
                p.insert(format!("layer{l}.{ln}.beta"), Tensor::zeros(&[d]), true);
            }
        }
        Ok(EncoderParams { config: config.clone(), params: p })
    }
}

impl<T: Scalar> EncoderParams<T> {
    pub fn cast<S: Scalar>(&self, f: impl Fn(T) -> S) -> EncoderParams<S> {
        EncoderParams { config: self.config.clone(), params: self.params.cast(f) }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    fn layer(&self, l: usize) -> Result<LayerWeights<'_, T>> {
        let g = |name: &str| -> Result<&[T]> { Ok(self.params.get(&format!("layer{l}.{name}"))?.data()) };
        Ok(LayerWeights {
            wq: g("attn.wq")?,
            bq: g("attn.bq")?,
            wk: g("attn.wk")?,
            bk: g("attn.bk")?,
            wv: g("attn.wv")?,
            bv: g("attn.bv")?,
            wo: g("attn.wo")?,
            bo: g("attn.bo")?,
            w1: g("ffn.w1")?,
            b1: g("ffn.b1")?,
            w2: g("ffn.w2")?,
            b2: g("ffn.b2")?,
            ln1_g: g("ln1.gamma")?,
            ln1_b: g("ln1.beta")?,
            ln2_g: g("ln2.gamma")?,
            ln2_b: g("ln2.beta")?,
        })
    }
}

struct LayerWeights<'a, T> {
    wq: &'a [T],
    bq: &'a [T],
    wk: &'a [T],
    bk: &'a [T],
    wv: &'a [T],
    bv: &'a [T],
    wo: &'a [T],
    bo: &'a [T],
    w1: &'a [T],
    b1: &'a [T],
    w2: &'a [T],
    b2: &'a [T],
    ln1_g: &'a [T],
    ln1_b: &'a [T],
    ln2_g: &'a [T],
    ln2_b: &'a [T],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    pub embedding: f64,
    pub hidden: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates { embedding: 0.2, hidden: 0.1 }
    }
}

impl DropoutRates {
    pub fn none() -> Self {
        DropoutRates { embedding: 0.0, hidden: 0.0 }
    }
}

/// Forward-pass settings. Dropout masks are drawn from `seed` and only in train mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub dropout: DropoutRates,
    pub seed: u64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions { mode: Mode::Eval, dropout: DropoutRates::none(), seed: 0 }
    }

    pub fn train(dropout: DropoutRates, seed: u64) -> Self {
        ForwardOptions { mode: Mode::Train, dropout, seed }
    }
}

struct LnTrace<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

struct LayerTrace<T> {
    rows_out: usize,
    x: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<Vec<T>>,
    ctx: Vec<T>,
    attn_adapter: Option<BlockTrace<T>>,
    mask1: Option<Vec<T>>,
    ln1: LnTrace<T>,
    h1: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
    ffn_adapter: Option<BlockTrace<T>>,
    mask2: Option<Vec<T>>,
    ln2: LnTrace<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct EncodeTrace<T> {
    tokens: Vec<u32>,
    emb_ln: LnTrace<T>,
    emb_mask: Option<Vec<T>>,
    layers: Vec<LayerTrace<T>>,
}

/// CLS representation of `tokens`.
pub fn encode<T: Scalar>(
    tokens: &[u32],
    phi: &EncoderParams<T>,
    adapters: Option<&AdapterParams<T>>,
    opts: &ForwardOptions,
) -> Result<Tensor<T>> {
    let (v, _) = encode_with_trace(tokens, phi, adapters, opts)?;
    Tensor::vector(v)
}

/// Strips trailing padding and clips to `max_len`; errors on empty or out-of-vocabulary input.
fn effective_tokens(tokens: &[u32], cfg: &EncoderConfig) -> Result<Vec<u32>> {
    let end = tokens
        .iter()
        .rposition(|&t| t != crate::encoder::PAD_ID)
        .map_or(0, |i| i + 1);
    let end = end.min(cfg.max_len);
    if end == 0 {
        return Err(Error::input("cannot encode an empty token sequence"));
    }
    let toks = tokens[..end].to_vec();
    if let Some(&bad) = toks.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::input(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    Ok(toks)
}

fn check_adapters<T: Scalar>(phi: &EncoderParams<T>, adapters: Option<&AdapterParams<T>>) -> Result<()> {
    if let Some(a) = adapters {
        if a.config.d_model != phi.config.d_model || a.config.layers != phi.config.n_layers {
            return Err(Error::config(format!(
                "adapter stack ({} layers, width {}) does not fit encoder ({} layers, width {})",
                a.config.layers, a.config.d_model, phi.config.n_layers, phi.config.d_model
            )));
        }
    }
    Ok(())
}

fn dropout_mask<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Option<Vec<T>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    Some((0..n).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect())
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v = *v * k;
        }
    }
}

fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, LnTrace<T>) {
    let d = gamma.len();
    let r = x.len() / d;
    let inv_d = T::lit(1.0 / d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(r);
    for i in 0..r {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let inv = (var + eps).sqrt().recip();
        inv_std.push(inv);
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            xhat[i * d + j] = xh;
            out[i * d + j] = gamma[j] * xh + beta[j];
        }
    }
    (out, LnTrace { xhat, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    tr: &LnTrace<T>,
    gamma: &[T],
    dy: &[T],
    grads: Option<(&mut [T], &mut [T])>,
) -> Vec<T> {
    let d = gamma.len();
    let r = dy.len() / d;
    if let Some((dg, db)) = grads {
        for i in 0..r {
            for j in 0..d {
                dg[j] = dg[j] + dy[i * d + j] * tr.xhat[i * d + j];
                db[j] = db[j] + dy[i * d + j];
            }
        }
    }
    let inv_d = T::lit(1.0 / d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for i in 0..r {
        let xh = &tr.xhat[i * d..(i + 1) * d];
        let dxhat: Vec<T> = (0..d).map(|j| dy[i * d + j] * gamma[j]).collect();
        let mean_dxhat = dxhat.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let mean_dx_xh = dxhat.iter().zip(xh).fold(T::zero(), |a, (&g, &h)| a + g * h) * inv_d;
        for j in 0..d {
            dx[i * d + j] = tr.inv_std[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dx_xh);
        }
    }
    dx
}

fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], rows: usize, din: usize, dout: usize) -> Vec<T> {
    let mut y = linalg::matmul(x, w, rows, din, dout);
    linalg::add_row_bias(&mut y, b);
    y
}

fn head_cols<T: Scalar>(x: &[T], rows: usize, d: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * dh);
    for i in 0..rows {
        out.extend_from_slice(&x[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head_cols<T: Scalar>(dst: &mut [T], src: &[T], rows: usize, d: usize, h: usize, dh: usize) {
    for i in 0..rows {
        for j in 0..dh {
            let o = &mut dst[i * d + h * dh + j];
            *o = *o + src[i * dh + j];
        }
    }
}

/// Forward pass keeping the intermediate values needed by [`backward`].
pub fn encode_with_trace<T: Scalar>(
    tokens: &[u32],
    phi: &EncoderParams<T>,
    adapters: Option<&AdapterParams<T>>,
    opts: &ForwardOptions,
) -> Result<(Vec<T>, EncodeTrace<T>)> {
    let cfg = &phi.config;
    check_adapters(phi, adapters)?;
    let tokens = effective_tokens(tokens, cfg)?;
    let n = tokens.len();
    let d = cfg.d_model;
    let eps = T::lit(cfg.ln_eps);
    let train = opts.mode == Mode::Train;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let tok = phi.params.get("emb.tok")?.data();
    let pos = phi.params.get("emb.pos")?.data();
    let mut e = vec![T::zero(); n * d];
    for (i, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        for j in 0..d {
            e[i * d + j] = tok[t * d + j] + pos[i * d + j];
        }
    }
    let (mut x, emb_ln) = layer_norm(
        &e,
        phi.params.get("emb.ln.gamma")?.data(),
        phi.params.get("emb.ln.beta")?.data(),
        eps,
    );
    let emb_mask = if train { dropout_mask(&mut rng, n * d, opts.dropout.embedding) } else { None };
    apply_mask(&mut x, &emb_mask);

    let hidden_rate = if train { opts.dropout.hidden } else { 0.0 };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let rows_out = if l + 1 == cfg.n_layers { 1 } else { n };
        let (out, trace) = layer_forward(l, x, rows_out, phi, adapters, hidden_rate, &mut rng)?;
        layers.push(trace);
        x = out;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite encoder output"));
    }
    Ok((x, EncodeTrace { tokens, emb_ln, emb_mask, layers }))
}

fn layer_forward<T: Scalar>(
    l: usize,
    x: Vec<T>,
    r: usize,
    phi: &EncoderParams<T>,
    adapters: Option<&AdapterParams<T>>,
    hidden_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<T>, LayerTrace<T>)> {
    let cfg = &phi.config;
    let w = phi.layer(l)?;
    let (d, ff, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
    let n = x.len() / d;
    let eps = T::lit(cfg.ln_eps);
    let scale = T::lit(1.0 / (dh as f64).sqrt());

    let q = linear(&x[..r * d], w.wq, w.bq, r, d, d);
    let k = linear(&x, w.wk, w.bk, n, d, d);
    let v = linear(&x, w.wv, w.bv, n, d, d);
    let mut ctx = vec![T::zero(); r * d];
    let mut probs = Vec::with_capacity(nh);
    for h in 0..nh {
        let qh = head_cols(&q, r, d, h, dh);
        let kh = head_cols(&k, n, d, h, dh);
        let vh = head_cols(&v, n, d, h, dh);
        let mut s = linalg::matmul_nt(&qh, &kh, r, dh, n);
        for row in s.chunks_mut(n) {
            for z in row.iter_mut() {
                *z = *z * scale;
            }
            let p = linalg::softmax(row);
            row.copy_from_slice(&p);
        }
        let ch = linalg::matmul(&s, &vh, r, n, dh);
        scatter_head_cols(&mut ctx, &ch, r, d, h, dh);
        probs.push(s);
    }
    let mut a = linear(&ctx, w.wo, w.bo, r, d, d);
    let attn_adapter = match adapters {
        Some(ad) => {
            let (out, tr) = ad.block(l, InsertionPoint::Attention)?.forward_rows(a);
            a = out;
            Some(tr)
        }
        None => None,
    };
    let mask1 = dropout_mask(rng, r * d, hidden_rate);
    apply_mask(&mut a, &mask1);
    let mut s1 = x[..r * d].to_vec();
    linalg::add_assign(&mut s1, &a);
    let (h1, ln1) = layer_norm(&s1, w.ln1_g, w.ln1_b, eps);

    let f1 = linear(&h1, w.w1, w.b1, r, d, ff);
    let g: Vec<T> = f1.iter().map(|&z| cfg.activation.apply(z)).collect();
    let mut f2 = linear(&g, w.w2, w.b2, r, ff, d);
    let ffn_adapter = match adapters {
        Some(ad) => {
            let (out, tr) = ad.block(l, InsertionPoint::FeedForward)?.forward_rows(f2);
            f2 = out;
            Some(tr)
        }
        None => None,
    };
    let mask2 = dropout_mask(rng, r * d, hidden_rate);
    apply_mask(&mut f2, &mask2);
    let mut s2 = h1.clone();
    linalg::add_assign(&mut s2, &f2);
    let (out, ln2) = layer_norm(&s2, w.ln2_g, w.ln2_b, eps);

    Ok((
        out,
        LayerTrace {
            rows_out: r,
            x,
            q,
            k,
            v,
            probs,
            ctx,
            attn_adapter,
            mask1,
            ln1,
            h1,
            f1,
            g,
            ffn_adapter,
            mask2,
            ln2,
        },
    ))
}

/// Gradient accumulators for one backward pass.
pub struct EncoderGradSinks<'a, T> {
    pub encoder: Option<&'a mut ParamSet<T>>,
    pub adapters: Option<&'a mut ParamSet<T>>,
}

/// Back-propagates `d_cls` (gradient w.r.t. the CLS representation) and
/// accumulates into the requested sinks, which must have the parameter layouts
/// of `phi` and `adapters` respectively.
pub fn backward<T: Scalar>(
    trace: &EncodeTrace<T>,
    d_cls: &[T],
    phi: &EncoderParams<T>,
    adapters: Option<&AdapterParams<T>>,
    mut sinks: EncoderGradSinks<'_, T>,
) -> Result<()> {
    let cfg = &phi.config;
    let d = cfg.d_model;
    if d_cls.len() != d {
        return Err(Error::config(format!("CLS gradient width {} != {d}", d_cls.len())));
    }
    let want_adapters = sinks.adapters.is_some() && adapters.is_some();
    let want_encoder = sinks.encoder.is_some();
    let mut dx = d_cls.to_vec();
    for l in (0..cfg.n_layers).rev() {
        let need_dx = want_encoder || (want_adapters && l > 0);
        let out = layer_backward(
            l,
            &trace.layers[l],
            &dx,
            phi,
            adapters,
            sinks.encoder.as_deref_mut(),
            if want_adapters { sinks.adapters.as_deref_mut() } else { None },
            need_dx,
        )?;
        match out {
            Some(next) => dx = next,
            None => return Ok(()),
        }
    }
    if let Some(g) = sinks.encoder {
        apply_mask(&mut dx, &trace.emb_mask);
        let gamma = phi.params.get("emb.ln.gamma")?.data();
        let mut dg = vec![T::zero(); d];
        let mut db = vec![T::zero(); d];
        let de = layer_norm_backward(&trace.emb_ln, gamma, &dx, Some((&mut dg, &mut db)));
        linalg::add_assign(g.get_mut("emb.ln.gamma")?.data_mut(), &dg);
        linalg::add_assign(g.get_mut("emb.ln.beta")?.data_mut(), &db);
        {
            let tok = g.get_mut("emb.tok")?.data_mut();
            for (i, &t) in trace.tokens.iter().enumerate() {
                let t = t as usize;
                for j in 0..d {
                    tok[t * d + j] = tok[t * d + j] + de[i * d + j];
                }
            }
        }
        let pos = g.get_mut("emb.pos")?.data_mut();
        linalg::add_assign(&mut pos[..de.len()], &de);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn layer_backward<T: Scalar>(
    l: usize,
    tr: &LayerTrace<T>,
    d_out: &[T],
    phi: &EncoderParams<T>,
    adapters: Option<&AdapterParams<T>>,
    mut enc: Option<&mut ParamSet<T>>,
    mut ad: Option<&mut ParamSet<T>>,
    need_dx: bool,
) -> Result<Option<Vec<T>>> {
    let cfg = &phi.config;
    let w = phi.layer(l)?;
    let (d, ff, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
    let r = tr.rows_out;
    let n = tr.x.len() / d;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let p = |name: &str| format!("layer{l}.{name}");

    // LN2
    let mut ln_g = enc.as_ref().map(|_| (vec![T::zero(); d], vec![T::zero(); d]));
    let ds2 = layer_norm_backward(&tr.ln2, w.ln2_g, d_out, ln_g.as_mut().map(|(a, b)| (a.as_mut_slice(), b.as_mut_slice())));
    if let (Some(g), Some((dg, db))) = (enc.as_deref_mut(), ln_g) {
        linalg::add_assign(g.get_mut(&p("ln2.gamma"))?.data_mut(), &dg);
        linalg::add_assign(g.get_mut(&p("ln2.beta"))?.data_mut(), &db);
    }
    let mut dh1 = ds2.clone();
    let mut df = ds2;
    apply_mask(&mut df, &tr.mask2);
    if let (Some(adp), Some(btr)) = (adapters, tr.ffn_adapter.as_ref()) {
        let key = block_key(l, InsertionPoint::FeedForward);
        df = adp
            .block(l, InsertionPoint::FeedForward)?
            .backward_rows(btr, &df, ad.as_deref_mut().map(|g| (g, key.as_str())))?;
    }
    // FFN
    if let Some(g) = enc.as_deref_mut() {
        linalg::matmul_tn_acc(g.get_mut(&p("ffn.w2"))?.data_mut(), &tr.g, &df, r, ff, d);
        linalg::col_sums_acc(g.get_mut(&p("ffn.b2"))?.data_mut(), &df);
    }
    let dg = linalg::matmul_nt(&df, w.w2, r, d, ff);
    let df1: Vec<T> = dg
        .iter()
        .zip(&tr.f1)
        .map(|(&g, &z)| g * cfg.activation.derivative(z))
        .collect();
    if let Some(g) = enc.as_deref_mut() {
        linalg::matmul_tn_acc(g.get_mut(&p("ffn.w1"))?.data_mut(), &tr.h1, &df1, r, d, ff);
        linalg::col_sums_acc(g.get_mut(&p("ffn.b1"))?.data_mut(), &df1);
    }
    linalg::add_assign(&mut dh1, &linalg::matmul_nt(&df1, w.w1, r, ff, d));

    // LN1
    let mut ln_g = enc.as_ref().map(|_| (vec![T::zero(); d], vec![T::zero(); d]));
    let ds1 = layer_norm_backward(&tr.ln1, w.ln1_g, &dh1, ln_g.as_mut().map(|(a, b)| (a.as_mut_slice(), b.as_mut_slice())));
    if let (Some(g), Some((dg, db))) = (enc.as_deref_mut(), ln_g) {
        linalg::add_assign(g.get_mut(&p("ln1.gamma"))?.data_mut(), &dg);
        linalg::add_assign(g.get_mut(&p("ln1.beta"))?.data_mut(), &db);
    }
    let mut da = ds1.clone();
    apply_mask(&mut da, &tr.mask1);
    if let (Some(adp), Some(btr)) = (adapters, tr.attn_adapter.as_ref()) {
        let key = block_key(l, InsertionPoint::Attention);
        da = adp
            .block(l, InsertionPoint::Attention)?
            .backward_rows(btr, &da, ad.as_deref_mut().map(|g| (g, key.as_str())))?;
    }
    if !need_dx && enc.is_none() {
        return Ok(None);
    }

    // attention output projection
    if let Some(g) = enc.as_deref_mut() {
        linalg::matmul_tn_acc(g.get_mut(&p("attn.wo"))?.data_mut(), &tr.ctx, &da, r, d, d);
        linalg::col_sums_acc(g.get_mut(&p("attn.bo"))?.data_mut(), &da);
    }
    let dctx = linalg::matmul_nt(&da, w.wo, r, d, d);
    let mut dq = vec![T::zero(); r * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    for h in 0..nh {
        let qh = head_cols(&tr.q, r, d, h, dh);
        let kh = head_cols(&tr.k, n, d, h, dh);
        let vh = head_cols(&tr.v, n, d, h, dh);
        let dch = head_cols(&dctx, r, d, h, dh);
        let probs = &tr.probs[h];
        let dp = linalg::matmul_nt(&dch, &vh, r, dh, n);
        let mut dvh = vec![T::zero(); n * dh];
        linalg::matmul_tn_acc(&mut dvh, probs, &dch, r, n, dh);
        let mut ds = vec![T::zero(); r * n];
        for i in 0..r {
            let prow = &probs[i * n..(i + 1) * n];
            let dprow = &dp[i * n..(i + 1) * n];
            let dot = linalg::dot(prow, dprow);
            for j in 0..n {
                ds[i * n + j] = prow[j] * (dprow[j] - dot) * scale;
            }
        }
        let dqh = linalg::matmul(&ds, &kh, r, n, dh);
        let mut dkh = vec![T::zero(); n * dh];
        linalg::matmul_tn_acc(&mut dkh, &ds, &qh, r, n, dh);
        scatter_head_cols(&mut dq, &dqh, r, d, h, dh);
        scatter_head_cols(&mut dk, &dkh, n, d, h, dh);
        scatter_head_cols(&mut dv, &dvh, n, d, h, dh);
    }
    if let Some(g) = enc.as_deref_mut() {
        linalg::matmul_tn_acc(g.get_mut(&p("attn.wq"))?.data_mut(), &tr.x[..r * d], &dq, r, d, d);
        linalg::col_sums_acc(g.get_mut(&p("attn.bq"))?.data_mut(), &dq);
        linalg::matmul_tn_acc(g.get_mut(&p("attn.wk"))?.data_mut(), &tr.x, &dk, n, d, d);
        linalg::col_sums_acc(g.get_mut(&p("attn.bk"))?.data_mut(), &dk);
        linalg::matmul_tn_acc(g.get_mut(&p("attn.wv"))?.data_mut(), &tr.x, &dv, n, d, d);
        linalg::col_sums_acc(g.get_mut(&p("attn.bv"))?.data_mut(), &dv);
    }
    if !need_dx {
        return Ok(None);
    }
    let mut dx = linalg::matmul_nt(&dk, w.wk, n, d, d);
    linalg::add_assign(&mut dx, &linalg::matmul_nt(&dv, w.wv, n, d, d));
    let dxq = linalg::matmul_nt(&dq, w.wq, r, d, d);
    linalg::add_assign(&mut dx[..r * d], &dxq);
    linalg::add_assign(&mut dx[..r * d], &ds1);
    Ok(Some(dx))
}
