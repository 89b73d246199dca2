//! Self-attention (SaM), cross-attention (CaM) and causal temporal (CTM)
//! blocks.
//!
//! Every block follows the same pre-normalised layout:
//!
//! ```text
//! ō   = LayerNorm₁(x)
//! Q   = ō·W_Q,  K = k̄·W_K,  V = k̄·W_V       (k̄ = ō, or LayerNorm₁(kv) for cross)
//! A   = norm(QKᵀ/√(d/h) + mask)·V, heads merged, then ·W_O
//! oᴬ  = LayerNorm₂(ō + A)
//! out = oᴬ + W₂·GELU(W₁·oᴬ + b₁) + b₂
//! ```
//!
//! The residual is taken from `ō`, not the raw input. `norm` is a softmax
//! by default or a masked standardisation when [`AttnNorm::LayerNormLiteral`]
//! is selected.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init_uniform, join, Linear, Norm};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Row normalisation applied to the attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnNorm {
    #[default]
    Softmax,
    /// Standardise each score row over its unmasked keys (no simplex
    /// constraint). Masked keys get weight exactly zero.
    LayerNormLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    #[serde(default)]
    pub norm: AttnNorm,
}

impl AttentionConfig {
    pub fn new(heads: usize) -> Self {
        AttentionConfig {
            heads,
            norm: AttnNorm::Softmax,
        }
    }
}

/// Parameters of one attention block of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock<P> {
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub w_o: P,
    pub ln1: Norm<P>,
    pub ln2: Norm<P>,
    pub ffn1: Linear<P>,
    pub ffn2: Linear<P>,
}

impl<P> AttentionBlock<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> AttentionBlock<Q> {
        AttentionBlock {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
            ln1: self.ln1.map(f),
            ln2: self.ln2.map(f),
            ffn1: self.ffn1.map(f),
            ffn2: self.ffn2.map(f),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        f(&join(prefix, "w_q"), &self.w_q);
        f(&join(prefix, "w_k"), &self.w_k);
        f(&join(prefix, "w_v"), &self.w_v);
        f(&join(prefix, "w_o"), &self.w_o);
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.ffn1.visit(&join(prefix, "ffn1"), f);
        self.ffn2.visit(&join(prefix, "ffn2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "w_q"), &mut self.w_q);
        f(&join(prefix, "w_k"), &mut self.w_k);
        f(&join(prefix, "w_v"), &mut self.w_v);
        f(&join(prefix, "w_o"), &mut self.w_o);
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.ffn1.visit_mut(&join(prefix, "ffn1"), f);
        self.ffn2.visit_mut(&join(prefix, "ffn2"), f);
    }
}

/// FFN hidden width for model width `d`.
pub fn ffn_width(d: usize) -> usize {
    2 * d
}

impl<F: Real> AttentionBlock<Tensor<F>> {
    pub fn init<R: Rng>(rng: &mut R, d: usize) -> Self {
        let d_ff = ffn_width(d);
        AttentionBlock {
            w_q: init_uniform(rng, &[d, d], d),
            w_k: init_uniform(rng, &[d, d], d),
            w_v: init_uniform(rng, &[d, d], d),
            w_o: init_uniform(rng, &[d, d], d),
            ln1: Norm::identity(d),
            ln2: Norm::identity(d),
            ffn1: Linear::init(rng, d, d_ff),
            ffn2: Linear::init(rng, d_ff, d),
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }

    /// Number of scalar parameters for width `d`.
    pub fn count(d: usize) -> usize {
        let d_ff = ffn_width(d);
        4 * d * d + 4 * d + (d * d_ff + d_ff) + (d_ff * d + d)
    }
}

/// Which keys a query may attend to, for a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionMask {
    None,
    /// Query `i` sees keys `j <= i`.
    Causal,
    /// `true` marks a valid key.
    KeyPadding(Vec<bool>),
}

/// Masking for a batch of `B` sequences.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchMask {
    None,
    Causal,
    /// `[B × Lk]` validity of each key.
    KeyValid(Vec<bool>),
    /// Causal, and key `j` must be valid unless `j` is the query itself.
    CausalKeyValid(Vec<bool>),
}

impl BatchMask {
    fn is_none(&self) -> bool {
        matches!(self, BatchMask::None)
    }

    /// Validity grid `[B' × Lq × Lk]` where `B'` is 1 for batch-independent
    /// masks.
    fn grid(&self, batch: usize, lq: usize, lk: usize) -> Result<(usize, Vec<bool>)> {
        let per_batch = |valid: &[bool]| -> Result<()> {
            if valid.len() != batch * lk {
                return Err(Error::dim("attention mask", &[batch, lk], &[valid.len()]));
            }
            Ok(())
        };
        let (nb, grid) = match self {
            BatchMask::None => (1, vec![true; lq * lk]),
            BatchMask::Causal => {
                if lq != lk {
                    return Err(Error::dim("causal mask", &[lq], &[lk]));
                }
                (1, (0..lq * lk).map(|e| e % lk <= e / lk).collect())
            }
            BatchMask::KeyValid(valid) => {
                per_batch(valid)?;
                let mut g = Vec::with_capacity(batch * lq * lk);
                for b in 0..batch {
                    for _ in 0..lq {
                        g.extend_from_slice(&valid[b * lk..(b + 1) * lk]);
                    }
                }
                (batch, g)
            }
            BatchMask::CausalKeyValid(valid) => {
                per_batch(valid)?;
                if lq != lk {
                    return Err(Error::dim("causal mask", &[lq], &[lk]));
                }
                let mut g = Vec::with_capacity(batch * lq * lk);
                for b in 0..batch {
                    for i in 0..lq {
                        for j in 0..lk {
                            g.push(j <= i && (j == i || valid[b * lk + j]));
                        }
                    }
                }
                (batch, g)
            }
        };
        for (row, chunk) in grid.chunks(lk).enumerate() {
            if !chunk.iter().any(|&v| v) {
                return Err(Error::MaskedRow { row });
            }
        }
        Ok((nb, grid))
    }
}

fn check_finite<F: Real>(tape: &Tape<F>, v: Var, what: &str) -> Result<()> {
    if !tape.value(v).is_finite() {
        return Err(Error::Contract(format!("non-finite values in {what}")));
    }
    Ok(())
}

/// Batched attention block.
///
/// `query` is `[B, Lq, d]`; `kv` is `[B, Lk, d]` for cross-attention or
/// `None` for self-attention. Returns the block output `[B, Lq, d]` and the
/// attention weights `[B, heads, Lq, Lk]`.
pub fn attention_block<F: Real>(
    tape: &mut Tape<F>,
    query: Var,
    kv: Option<Var>,
    p: &AttentionBlock<Var>,
    cfg: &AttentionConfig,
    mask: &BatchMask,
) -> Result<(Var, Var)> {
    let qs = tape.shape(query).to_vec();
    if qs.len() != 3 {
        return Err(Error::dim("attention query", &qs, &[3]));
    }
    let (batch, lq, d) = (qs[0], qs[1], qs[2]);
    let heads = cfg.heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    check_finite(tape, query, "attention query")?;

    let o_bar = p.ln1.forward(tape, query)?;
    let (kv_bar, lk) = match kv {
        Some(kv) => {
            let ks = tape.shape(kv).to_vec();
            if ks.len() != 3 || ks[0] != batch || ks[2] != d {
                return Err(Error::dim("attention key/value", &qs, &ks));
            }
            check_finite(tape, kv, "attention key/value")?;
            (p.ln1.forward(tape, kv)?, ks[1])
        }
        None => (o_bar, lq),
    };
    let (mask_batch, grid) = mask.grid(batch, lq, lk)?;

    let q = tape.matmul(o_bar, p.w_q)?;
    let k = tape.matmul(kv_bar, p.w_k)?;
    let v = tape.matmul(kv_bar, p.w_v)?;
    let q = tape.reshape(q, &[batch, lq, heads, dh])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.reshape(k, &[batch, lk, heads, dh])?;
    let kt = tape.permute(k, &[0, 2, 3, 1])?;
    let v = tape.reshape(v, &[batch, lk, heads, dh])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;

    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = match cfg.norm {
        AttnNorm::Softmax => {
            let masked = if mask.is_none() {
                scores
            } else {
                let add: Vec<F> = grid
                    .iter()
                    .map(|&ok| if ok { F::zero() } else { F::neg_infinity() })
                    .collect();
                let add = tape.constant(Tensor::new([mask_batch, 1, lq, lk], add)?);
                tape.add(scores, add)?
            };
            tape.softmax(masked, 3)?
        }
        AttnNorm::LayerNormLiteral => {
            let rows = lq * lk;
            let mut valid = Vec::with_capacity(batch * heads * rows);
            for b in 0..batch {
                let src = if mask_batch == 1 { 0 } else { b };
                for _ in 0..heads {
                    valid.extend_from_slice(&grid[src * rows..(src + 1) * rows]);
                }
            }
            tape.masked_standardize(scores, valid)?
        }
    };

    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[batch, lq, d])?;
    let attn = tape.matmul(ctx, p.w_o)?;

    let res = tape.add(o_bar, attn)?;
    let o_a = p.ln2.forward(tape, res)?;
    let h = p.ffn1.forward(tape, o_a)?;
    let h = tape.gelu(h);
    let h = p.ffn2.forward(tape, h)?;
    let out = tape.add(o_a, h)?;
    Ok((out, weights))
}

/// Runs `blocks` in sequence. Cross-attention stacks keep `kv` fixed while
/// the query stream is updated. Returns the final output and the attention
/// weights of the last block (`None` for an empty stack).
pub fn stack<F: Real>(
    tape: &mut Tape<F>,
    blocks: &[AttentionBlock<Var>],
    query: Var,
    kv: Option<Var>,
    cfg: &AttentionConfig,
    mask: &BatchMask,
) -> Result<(Var, Option<Var>)> {
    let mut x = query;
    let mut last = None;
    for block in blocks {
        let (y, w) = attention_block(tape, x, kv, block, cfg, mask)?;
        x = y;
        last = Some(w);
    }
    Ok((x, last))
}

fn single(mask: &AttentionMask) -> BatchMask {
    match mask {
        AttentionMask::None => BatchMask::None,
        AttentionMask::Causal => BatchMask::Causal,
        AttentionMask::KeyPadding(valid) => BatchMask::KeyValid(valid.clone()),
    }
}

fn unbatch<F: Real>(tape: &mut Tape<F>, out: Var, weights: Var) -> Result<(Var, Var)> {
    let os = tape.shape(out)[1..].to_vec();
    let ws = tape.shape(weights)[1..].to_vec();
    Ok((tape.reshape(out, &os)?, tape.reshape(weights, &ws)?))
}

/// Self-attention over one sequence `x: [L, d]`. Returns `[L, d]` and
/// weights `[heads, L, L]`.
pub fn self_attention_block<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    p: &AttentionBlock<Var>,
    cfg: &AttentionConfig,
    mask: &AttentionMask,
) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    let xb = tape.reshape(x, &[1, s[0], s[1]])?;
    let (out, w) = attention_block(tape, xb, None, p, cfg, &single(mask))?;
    unbatch(tape, out, w)
}

/// Cross-attention with queries `[Lq, d]` over keys/values `[Lk, d]`.
/// Returns `[Lq, d]` and weights `[heads, Lq, Lk]`.
pub fn cross_attention_block<F: Real>(
    tape: &mut Tape<F>,
    query_seq: Var,
    kv_seq: Var,
    p: &AttentionBlock<Var>,
    cfg: &AttentionConfig,
    mask: &AttentionMask,
) -> Result<(Var, Var)> {
    let qs = tape.shape(query_seq).to_vec();
    let ks = tape.shape(kv_seq).to_vec();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::dim("cross attention", &qs, &ks));
    }
    let qb = tape.reshape(query_seq, &[1, qs[0], qs[1]])?;
    let kb = tape.reshape(kv_seq, &[1, ks[0], ks[1]])?;
    let (out, w) = attention_block(tape, qb, Some(kb), p, cfg, &single(mask))?;
    unbatch(tape, out, w)
}

/// Causally masked self-attention over a time sequence `[T, d]`.
pub fn causal_temporal_block<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    p: &AttentionBlock<Var>,
    cfg: &AttentionConfig,
) -> Result<Var> {
    Ok(self_attention_block(tape, x, p, cfg, &AttentionMask::Causal)?.0)
}
