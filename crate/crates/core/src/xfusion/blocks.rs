//! Building blocks of an X-Fusion layer: key-value generators, the cross-modal transformer,
//! per-modality cross-attention and the plain self-attention block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::FusionConfig;
use crate::encoding::init_uniform;
use crate::error::{Result, XfiError};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

/// Training-time state threaded through a forward pass.
#[derive(Debug)]
pub struct ForwardCtx {
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl ForwardCtx {
    /// Inference: dropout disabled.
    pub fn eval() -> Self {
        Self { dropout: None }
    }

    /// Training with dropout at `rate`, masks drawn from `rng`.
    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Self {
            dropout: (rate > 0.0).then_some((rate, rng)),
        }
    }

    pub(crate) fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let shape = tape.shape(x).to_vec();
        let numel = shape.iter().product();
        let mask = (0..numel)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }
}

fn init_weight<R: Rng>(store: &mut ParameterStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
    store.insert(format!("{prefix}.w"), init_uniform(fan_in, fan_out, rng))
}

fn init_linear<R: Rng>(store: &mut ParameterStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
    store.insert(format!("{prefix}.w"), init_uniform(fan_in, fan_out, rng))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

fn init_norm(store: &mut ParameterStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor::ones(&[d]))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))
}

fn init_attn_out<R: Rng>(store: &mut ParameterStore, prefix: &str, cfg: &FusionConfig, rng: &mut R) -> Result<()> {
    let name = format!("{prefix}.attn_out");
    init_linear(store, &name, cfg.d_f, cfg.d_f, rng)?;
    if cfg.identity_attn_out {
        store.set_values(&format!("{name}.w"), Tensor::eye(cfg.d_f).data())?;
    }
    Ok(())
}

fn init_ffn_and_norms<R: Rng>(store: &mut ParameterStore, prefix: &str, cfg: &FusionConfig, rng: &mut R) -> Result<()> {
    init_linear(store, &format!("{prefix}.ffn1"), cfg.d_f, cfg.ffn_hidden, rng)?;
    init_linear(store, &format!("{prefix}.ffn2"), cfg.ffn_hidden, cfg.d_f, rng)?;
    if cfg.post_norm {
        init_norm(store, &format!("{prefix}.norm1"), cfg.d_f)?;
        init_norm(store, &format!("{prefix}.norm2"), cfg.d_f)?;
    }
    Ok(())
}

/// Two-layer MLP with hidden width `2·d_f`, layer norm after the ReLU, then separate key and
/// value projections.
pub fn init_kv_generator<R: Rng>(store: &mut ParameterStore, prefix: &str, d_f: usize, rng: &mut R) -> Result<()> {
    init_linear(store, &format!("{prefix}.fc1"), d_f, 2 * d_f, rng)?;
    init_norm(store, &format!("{prefix}.ln"), 2 * d_f)?;
    init_linear(store, &format!("{prefix}.fc2"), 2 * d_f, d_f, rng)?;
    init_weight(store, &format!("{prefix}.key"), d_f, d_f, rng)?;
    init_linear(store, &format!("{prefix}.value"), d_f, d_f, rng)
}

/// Q/K/V projections, attention output projection, FFN and optional norms. Used for both
/// the cross-modal transformer and the self-attention encoder blocks.
pub fn init_self_attention<R: Rng>(store: &mut ParameterStore, prefix: &str, cfg: &FusionConfig, rng: &mut R) -> Result<()> {
    init_linear(store, &format!("{prefix}.q"), cfg.d_f, cfg.d_f, rng)?;
    init_weight(store, &format!("{prefix}.k"), cfg.d_f, cfg.d_f, rng)?;
    init_linear(store, &format!("{prefix}.v"), cfg.d_f, cfg.d_f, rng)?;
    init_attn_out(store, prefix, cfg, rng)?;
    init_ffn_and_norms(store, prefix, cfg, rng)
}

/// Query projection for the cross-modal embedding plus output projection, FFN and norms.
pub fn init_cross_attention<R: Rng>(store: &mut ParameterStore, prefix: &str, cfg: &FusionConfig, rng: &mut R) -> Result<()> {
    init_linear(store, &format!("{prefix}.query"), cfg.d_f, cfg.d_f, rng)?;
    init_attn_out(store, prefix, cfg, rng)?;
    init_ffn_and_norms(store, prefix, cfg, rng)
}

/// Bias-free projection. Used for attention keys: a key bias only shifts every logit of a
/// query by the same amount, which softmax cancels.
fn weight_only(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    tape.matmul(x, w)
}

pub(crate) fn linear(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.linear(x, w, Some(b))
}

fn norm(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.g"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, b, eps)
}

fn maybe_norm(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var, cfg: &FusionConfig) -> Result<Var> {
    if cfg.post_norm {
        norm(tape, store, prefix, x, cfg.norm_eps)
    } else {
        Ok(x)
    }
}

/// `FFN(x) + x`, followed by the second norm when enabled.
fn ffn_residual(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x: Var,
    cfg: &FusionConfig,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let h = linear(tape, store, &format!("{prefix}.ffn1"), x)?;
    let h = tape.relu(h)?;
    let h = linear(tape, store, &format!("{prefix}.ffn2"), h)?;
    let h = ctx.dropout(tape, h)?;
    let y = tape.add(h, x)?;
    maybe_norm(tape, store, &format!("{prefix}.norm2"), y, cfg)
}

fn check_block(tape: &Tape, x: Var, groups: usize, n_f: usize, d_f: usize, op: &'static str) -> Result<usize> {
    let (rows, cols) = tape.value(x).dims2()?;
    if cols != d_f || groups == 0 || !rows.is_multiple_of(groups) || !(rows / groups).is_multiple_of(n_f) {
        return Err(XfiError::InvalidShape {
            shape: vec![rows, cols],
            reason: format!("{op}: expected {groups} groups of a positive multiple of {n_f} tokens × {d_f}"),
        });
    }
    Ok(rows / groups)
}

/// `h = fc2(LN(ReLU(fc1(F))))`, `K = key(h)`, `V = value(h)`.
pub fn generate_kv(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    features: Var,
    eps: f64,
) -> Result<(Var, Var)> {
    let h = linear(tape, store, &format!("{prefix}.fc1"), features)?;
    let h = tape.relu(h)?;
    let h = norm(tape, store, &format!("{prefix}.ln"), h, eps)?;
    let h = linear(tape, store, &format!("{prefix}.fc2"), h)?;
    let k = weight_only(tape, store, &format!("{prefix}.key"), h)?;
    let v = linear(tape, store, &format!("{prefix}.value"), h)?;
    Ok((k, v))
}

/// Cross-modal transformer over `groups` stacked multi-modal embeddings:
///
/// `Z = pool(MHA(Q, K, V)) + pool(Emb_mm)`, `Emb_cm = FFN(Z) + Z`.
pub fn cross_modal_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    emb_mm: Var,
    groups: usize,
    cfg: &FusionConfig,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    check_block(tape, emb_mm, groups, cfg.n_f, cfg.d_f, "cross_modal_forward")?;
    let q = linear(tape, store, &format!("{prefix}.q"), emb_mm)?;
    let k = weight_only(tape, store, &format!("{prefix}.k"), emb_mm)?;
    let v = linear(tape, store, &format!("{prefix}.v"), emb_mm)?;
    let attn = tape.attention(q, k, v, cfg.heads, cfg.scale, groups)?;
    let attn = linear(tape, store, &format!("{prefix}.attn_out"), attn)?;
    let attn = ctx.dropout(tape, attn)?;
    let pooled_attn = tape.adaptive_avg_pool(attn, groups, cfg.n_f)?;
    let pooled_emb = tape.adaptive_avg_pool(emb_mm, groups, cfg.n_f)?;
    let z = tape.add(pooled_attn, pooled_emb)?;
    let z = maybe_norm(tape, store, &format!("{prefix}.norm1"), z, cfg)?;
    ffn_residual(tape, store, prefix, z, cfg, ctx)
}

/// Injects one modality's key-value pair into the cross-modal embedding:
///
/// `O = MHA(query(Emb_cm), K, V)`, `O' = O + Emb_cm`, `F' = FFN(O') + O'`.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_inject(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    emb_cm: Var,
    key: Var,
    value: Var,
    groups: usize,
    cfg: &FusionConfig,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let rows = check_block(tape, emb_cm, groups, cfg.n_f, cfg.d_f, "cross_attention_inject")?;
    if rows != cfg.n_f {
        return Err(XfiError::shape("cross_attention_inject", tape.shape(emb_cm), &[groups * cfg.n_f, cfg.d_f]));
    }
    if tape.shape(key) != tape.shape(emb_cm) {
        return Err(XfiError::shape("cross_attention_inject", tape.shape(emb_cm), tape.shape(key)));
    }
    let q = linear(tape, store, &format!("{prefix}.query"), emb_cm)?;
    let o = tape.attention(q, key, value, cfg.heads, cfg.scale, groups)?;
    let o = linear(tape, store, &format!("{prefix}.attn_out"), o)?;
    let o = ctx.dropout(tape, o)?;
    let o = tape.add(o, emb_cm)?;
    let o = maybe_norm(tape, store, &format!("{prefix}.norm1"), o, cfg)?;
    ffn_residual(tape, store, prefix, o, cfg, ctx)
}

/// Standard encoder block: `x + MHA(x)`, then `FFN + residual`, norms after each sum when
/// enabled. Token count is preserved.
pub fn self_attention_block(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x: Var,
    groups: usize,
    cfg: &FusionConfig,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    check_block(tape, x, groups, 1, cfg.d_f, "self_attention_block")?;
    let q = linear(tape, store, &format!("{prefix}.q"), x)?;
    let k = weight_only(tape, store, &format!("{prefix}.k"), x)?;
    let v = linear(tape, store, &format!("{prefix}.v"), x)?;
    let attn = tape.attention(q, k, v, cfg.heads, cfg.scale, groups)?;
    let attn = linear(tape, store, &format!("{prefix}.attn_out"), attn)?;
    let attn = ctx.dropout(tape, attn)?;
    let y = tape.add(attn, x)?;
    let y = maybe_norm(tape, store, &format!("{prefix}.norm1"), y, cfg)?;
    ffn_residual(tape, store, prefix, y, cfg, ctx)
}
