//! Building blocks of the model: embedding with dropout + norm, the
//! selective-SSM block, multi-head causal attention, the position-wise
//! feed-forward network, post-norm residual wiring, and the prediction
//! head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

/// Gain/offset pair of a LayerNorm.
pub struct NormParams<R: Real> {
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
}

impl<R: Real> NormParams<R> {
    pub fn new(d: usize) -> Self {
        NormParams {
            gamma: Tensor::full(&[d], R::ONE).requires_grad(),
            beta: Tensor::zeros(&[d]).requires_grad(),
        }
    }
}

/// Item embedding table `[|V|+1, D]`; row 0 is the all-zero padding row,
/// frozen out of gradient updates.
pub struct EmbeddingTable<R: Real> {
    pub weight: Tensor<R>,
    pub vocab: usize,
    pub d: usize,
}

impl<R: Real> EmbeddingTable<R> {
    pub fn new(vocab: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if vocab < 1 || d < 1 {
            return Err(Error::Config(format!(
                "embedding needs |V| >= 1 and D >= 1, got {vocab}, {d}"
            )));
        }
        let mut w = Tensor::<R>::randn(&[vocab + 1, d], INIT_STD, rng).to_vec();
        for v in w.iter_mut().take(d) {
            *v = R::ZERO;
        }
        Ok(EmbeddingTable {
            weight: Tensor::from_vec(&[vocab + 1, d], w)?.requires_grad(),
            vocab,
            d,
        })
    }
}

/// Lookup -> dropout -> layer norm, in that order. Padding positions stay
/// deterministic: the zero row is zero before the norm.
pub fn embed_sequence<R: Real>(
    tape: &Tape<R>,
    items: &[u32],
    batch_shape: (usize, usize),
    table: &EmbeddingTable<R>,
    norm: &NormParams<R>,
    p_drop: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<R>> {
    let h = tape.embedding(items, batch_shape, &table.weight)?;
    let h = tape.dropout(&h, p_drop, training, rng)?;
    tape.layer_norm(&h, &norm.gamma, &norm.beta, LAYER_NORM_EPS)
}

/// Parameters of one selective-SSM block. The internal formulation is the
/// conventional one: ZOH discretization `abar = exp(delta*A)` with
/// `bbar = delta*B`, softplus-constrained delta, SiLU gating, a depthwise
/// causal conv, `A = -exp(A_log)`, and `dt_rank = ceil(D/16)`. In/out
/// projections carry no bias.
pub struct MambaBlockParams<R: Real> {
    pub in_proj: Tensor<R>,    // [D, 2*E]
    pub conv_kernel: Tensor<R>, // [K, E]
    pub conv_bias: Tensor<R>,  // [E]
    pub x_proj: Tensor<R>,     // [E, dt_rank + 2*S]
    pub dt_proj_w: Tensor<R>,  // [dt_rank, E]
    pub dt_proj_b: Tensor<R>,  // [E]
    pub a_log: Tensor<R>,      // [E, S]
    pub d_skip: Tensor<R>,     // [E]
    pub out_proj: Tensor<R>,   // [E, D]
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub conv_k: usize,
}

impl<R: Real> MambaBlockParams<R> {
    pub fn new(
        d_model: usize,
        d_state: usize,
        conv_k: usize,
        expand: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d_model < 1 || d_state < 1 || conv_k < 1 || expand < 1 {
            return Err(Error::Config("mamba block extents must be positive".into()));
        }
        let e = expand * d_model;
        let dt_rank = d_model.div_ceil(16);
        // A[c, s] = -(s+1): a stable spread of decay rates per state.
        let a_log: Vec<R> = (0..e * d_state)
            .map(|i| R::from_f64(((i % d_state + 1) as f64).ln()))
            .collect();
        // dt bias chosen so softplus(dt) lands in [1e-3, 1e-1].
        let dt_b: Vec<R> = (0..e)
            .map(|_| {
                let dt = (rng.gen::<f64>() * (0.1f64.ln() - 0.001f64.ln()) + 0.001f64.ln()).exp();
                R::from_f64((dt.exp() - 1.0).ln()) // inverse softplus
            })
            .collect();
        Ok(MambaBlockParams {
            in_proj: Tensor::randn(&[d_model, 2 * e], INIT_STD, rng).requires_grad(),
            conv_kernel: Tensor::randn(&[conv_k, e], INIT_STD, rng).requires_grad(),
            conv_bias: Tensor::zeros(&[e]).requires_grad(),
            x_proj: Tensor::randn(&[e, dt_rank + 2 * d_state], INIT_STD, rng).requires_grad(),
            dt_proj_w: Tensor::randn(&[dt_rank, e], INIT_STD, rng).requires_grad(),
            dt_proj_b: Tensor::from_vec(&[e], dt_b)?.requires_grad(),
            a_log: Tensor::from_vec(&[e, d_state], a_log)?.requires_grad(),
            d_skip: Tensor::full(&[e], R::ONE).requires_grad(),
            out_proj: Tensor::randn(&[e, d_model], INIT_STD, rng).requires_grad(),
            d_model,
            d_inner: e,
            d_state,
            dt_rank,
            conv_k,
        })
    }
}

/// One Mamba block: project in, split into value and gate branches, run
/// conv + SiLU + selective scan on the value branch, gate, project out.
/// Shape-preserving `[B, L, D] -> [B, L, D]` and strictly causal.
pub fn mamba_block<R: Real>(
    tape: &Tape<R>,
    x: &Tensor<R>,
    p: &MambaBlockParams<R>,
) -> Result<Tensor<R>> {
    let sh = x.shape().to_vec();
    if sh.len() != 3 || sh[2] != p.d_model {
        return Err(Error::shape("mamba_block input", &sh, &[0, 0, p.d_model]));
    }
    let (b, l) = (sh[0], sh[1]);
    let e = p.d_inner;
    let s = p.d_state;

    let flat = tape.reshape(x, &[b * l, p.d_model])?;
    let proj = tape.matmul(&flat, &p.in_proj)?; // [B*L, 2E]
    let xb = tape.slice_last(&proj, 0, e)?;
    let zb = tape.slice_last(&proj, e, e)?;
    let xb = tape.reshape(&xb, &[b, l, e])?;

    let xb = tape.causal_conv1d(&xb, &p.conv_kernel, &p.conv_bias)?;
    let xb = tape.silu(&xb)?;

    let xflat = tape.reshape(&xb, &[b * l, e])?;
    let proj2 = tape.matmul(&xflat, &p.x_proj)?; // [B*L, dt_rank + 2S]
    let dt = tape.slice_last(&proj2, 0, p.dt_rank)?;
    let b_in = tape.reshape(&tape.slice_last(&proj2, p.dt_rank, s)?, &[b, l, s])?;
    let c_in = tape.reshape(&tape.slice_last(&proj2, p.dt_rank + s, s)?, &[b, l, s])?;

    let dt = tape.matmul(&dt, &p.dt_proj_w)?; // [B*L, E]
    let dt = tape.add_broadcast(&dt, &p.dt_proj_b)?;
    let delta = tape.reshape(&tape.softplus(&dt)?, &[b, l, e])?;

    let a = tape.elementwise(
        &tape.elementwise(&p.a_log, crate::numerics::Unary::Exp)?,
        crate::numerics::Unary::Neg,
    )?;
    let y = tape.selective_scan(&xb, &delta, &a, &b_in, &c_in, &p.d_skip)?;

    let gate = tape.silu(&tape.reshape(&zb, &[b, l, e])?)?;
    let y = tape.mul(&y, &gate)?;
    let y = tape.matmul(&tape.reshape(&y, &[b * l, e])?, &p.out_proj)?;
    tape.reshape(&y, &[b, l, p.d_model])
}

/// Per-head projection matrices plus the output projection.
pub struct AttentionParams<R: Real> {
    pub w_q: Vec<Tensor<R>>, // h x [D, d_k]
    pub w_k: Vec<Tensor<R>>,
    pub w_v: Vec<Tensor<R>>,
    pub w_o: Tensor<R>, // [h*d_v, D]
    pub n_heads: usize,
    pub d_k: usize,
}

impl<R: Real> AttentionParams<R> {
    pub fn new(d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "head count {n_heads} must divide d_model {d_model}"
            )));
        }
        let d_k = d_model / n_heads;
        let mk = |rng: &mut ChaCha8Rng| Tensor::randn(&[d_model, d_k], INIT_STD, rng).requires_grad();
        Ok(AttentionParams {
            w_q: (0..n_heads).map(|_| mk(rng)).collect(),
            w_k: (0..n_heads).map(|_| mk(rng)).collect(),
            w_v: (0..n_heads).map(|_| mk(rng)).collect(),
            w_o: Tensor::randn(&[d_model, d_model], INIT_STD, rng).requires_grad(),
            n_heads,
            d_k,
        })
    }
}

/// Causally masked multi-head self-attention with 1/sqrt(d_k) scaling.
/// `key_mask[b*L + s]` marks real (non-padding) keys; rows with no
/// eligible key output zero.
pub fn multi_head_attention<R: Real>(
    tape: &Tape<R>,
    x: &Tensor<R>,
    p: &AttentionParams<R>,
    key_mask: &[bool],
) -> Result<Tensor<R>> {
    let sh = x.shape().to_vec();
    if sh.len() != 3 {
        return Err(Error::shape("multi_head_attention input", &sh, &[0, 0, 0]));
    }
    let (b, l, d) = (sh[0], sh[1], sh[2]);
    let flat = tape.reshape(x, &[b * l, d])?;
    let scale = R::from_f64(1.0 / (p.d_k as f64).sqrt());
    let mut heads = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let q = tape.reshape(&tape.matmul(&flat, &p.w_q[h])?, &[b, l, p.d_k])?;
        let k = tape.reshape(&tape.matmul(&flat, &p.w_k[h])?, &[b, l, p.d_k])?;
        let v = tape.reshape(&tape.matmul(&flat, &p.w_v[h])?, &[b, l, p.d_k])?;
        let q = tape.scale(&q, scale)?;
        let scores = tape.matmul_ex(&q, &k, true)?; // [B, L, L]
        let attn = tape.attention_softmax(&scores, key_mask, true)?;
        let ctx = tape.matmul(&attn, &v)?; // [B, L, d_k]
        heads.push(ctx);
    }
    let refs: Vec<&Tensor<R>> = heads.iter().collect();
    let cat = tape.concat_last(&refs)?; // [B, L, D]
    let out = tape.matmul(&tape.reshape(&cat, &[b * l, d])?, &p.w_o)?;
    tape.reshape(&out, &[b, l, d])
}

/// The two-layer position-wise network with inner width exactly `4D`.
pub struct FfnParams<R: Real> {
    pub w1: Tensor<R>, // [D, 4D]
    pub b1: Tensor<R>, // [4D]
    pub w2: Tensor<R>, // [4D, D]
    pub b2: Tensor<R>, // [D]
}

impl<R: Real> FfnParams<R> {
    pub fn new(d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        FfnParams {
            w1: Tensor::randn(&[d_model, 4 * d_model], INIT_STD, rng).requires_grad(),
            b1: Tensor::zeros(&[4 * d_model]).requires_grad(),
            w2: Tensor::randn(&[4 * d_model, d_model], INIT_STD, rng).requires_grad(),
            b2: Tensor::zeros(&[d_model]).requires_grad(),
        }
    }
}

/// `FFN(H) = GELU(H W1 + b1) W2 + b2`, applied position-wise.
pub fn feed_forward<R: Real>(
    tape: &Tape<R>,
    h: &Tensor<R>,
    p: &FfnParams<R>,
) -> Result<Tensor<R>> {
    let sh = h.shape().to_vec();
    let d = *sh.last().unwrap();
    let rows = h.numel() / d;
    let flat = tape.reshape(h, &[rows, d])?;
    let inner = tape.add_broadcast(&tape.matmul(&flat, &p.w1)?, &p.b1)?;
    let inner = tape.gelu(&inner)?;
    let out = tape.add_broadcast(&tape.matmul(&inner, &p.w2)?, &p.b2)?;
    tape.reshape(&out, &sh)
}

/// Post-norm residual wiring: `layer_norm(x + dropout(sublayer_out))`.
/// With `use_residual` off (the Remove RC ablation) the skip path is
/// dropped: `layer_norm(dropout(sublayer_out))`.
#[allow(clippy::too_many_arguments)]
pub fn residual_norm<R: Real>(
    tape: &Tape<R>,
    x: &Tensor<R>,
    sublayer_out: &Tensor<R>,
    norm: &NormParams<R>,
    p_drop: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
    use_residual: bool,
) -> Result<Tensor<R>> {
    if x.shape() != sublayer_out.shape() {
        return Err(Error::shape("residual_norm", x.shape(), sublayer_out.shape()));
    }
    let dropped = tape.dropout(sublayer_out, p_drop, training, rng)?;
    let pre = if use_residual {
        tape.add(x, &dropped)?
    } else {
        dropped
    };
    tape.layer_norm(&pre, &norm.gamma, &norm.beta, LAYER_NORM_EPS)
}

/// Scores for every item `1..=|V|` from hidden states: `H W_h + b_h`.
/// Returns logits; softmax is applied downstream only where probabilities
/// are needed.
pub fn predict_scores<R: Real>(
    tape: &Tape<R>,
    h: &Tensor<R>,
    w_h: &Tensor<R>,
    b_h: &Tensor<R>,
) -> Result<Tensor<R>> {
    let sh = h.shape().to_vec();
    let d = *sh.last().unwrap();
    let rows = h.numel() / d;
    let v = w_h.shape()[1];
    let flat = tape.reshape(h, &[rows, d])?;
    let logits = tape.add_broadcast(&tape.matmul(&flat, w_h)?, b_h)?;
    let mut out_shape = sh;
    *out_shape.last_mut().unwrap() = v;
    tape.reshape(&logits, &out_shape)
}
