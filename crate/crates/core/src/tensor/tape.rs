use std::collections::HashMap;

use super::kernels::{broadcast_index, gemm_nn, gemm_nt, gemm_tn, phi_cdf, phi_pdf, split_axis, strides};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction applied over a trailing temporal window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Sigmoid,
    Gelu,
    Affine(f64, f64),
    Powf(f64),
    Clamp(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

enum Bcast {
    Same,
    /// `b` is a trailing block of `a` repeated along the leading axes.
    Suffix(usize),
    General {
        ia: Vec<usize>,
        ib: Vec<usize>,
    },
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinKind,
        bcast: Bcast,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        outer: usize,
        len: usize,
        inner: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Standardize {
        x: Var,
        valid: Vec<bool>,
        len: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    WindowPool {
        x: Var,
        pool: Pool,
        window: usize,
        steps: usize,
        width: usize,
        argmax: Vec<u32>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        count: usize,
    },
    Sum {
        x: Var,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape is confined to one thread. Calling [`Tape::backward`] more than once
/// adds into the stored leaf gradients; use [`Tape::zero_grad`] to reset them.
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
    grads: HashMap<usize, Vec<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Accumulated gradient of a leaf (or of a backward root).
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        self.grads.get(&v.0).map(|g| Tensor {
            shape: self.nodes[v.0].value.shape().to_vec(),
            data: g.clone(),
        })
    }

    /// Gradient of a differentiable leaf, zeros when it was not reached.
    pub fn grad_or_zero(&self, v: Var) -> Tensor<F> {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] × [.., k, n]`. Batch extents must
    /// agree, or one side must be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (batch_shape, a_batched, b_batched) = if ba == bb {
            (ba.to_vec(), !ba.is_empty(), !bb.is_empty())
        } else if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return Err(Error::dim("matmul", &sa, &sb));
        };
        let batch = numel(&batch_shape);
        let mut out = vec![F::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let ao = if a_batched { bi * m * k } else { 0 };
                let bo = if b_batched { bi * k * n } else { 0 };
                gemm_nn(
                    &av[ao..ao + m * k],
                    &bv[bo..bo + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
            ng,
        ))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (out_shape, bcast) = if sa == sb {
            (sa.clone(), Bcast::Same)
        } else if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
            (sa.clone(), Bcast::Suffix(numel(&sb)))
        } else {
            let nd = sa.len().max(sb.len());
            let mut out = vec![0; nd];
            for i in 0..nd {
                let ea = if i + sa.len() >= nd { sa[i + sa.len() - nd] } else { 1 };
                let eb = if i + sb.len() >= nd { sb[i + sb.len() - nd] } else { 1 };
                out[i] = if ea == eb || eb == 1 {
                    ea
                } else if ea == 1 {
                    eb
                } else {
                    return Err(Error::dim("broadcast", &sa, &sb));
                };
            }
            let ia = broadcast_index(&sa, &out);
            let ib = broadcast_index(&sb, &out);
            (out, Bcast::General { ia, ib })
        };
        let f = |x: F, y: F| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<F> = match &bcast {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Suffix(len) => av.iter().enumerate().map(|(i, &x)| f(x, bv[i % len])).collect(),
            Bcast::General { ia, ib } => ia.iter().zip(ib).map(|(&i, &j)| f(av[i], bv[j])).collect(),
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Binary { a, b, kind, bcast }, ng))
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::Sigmoid => {
                    if v >= F::zero() {
                        F::one() / (F::one() + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (F::one() + e)
                    }
                }
                Unary::Gelu => v * phi_cdf(v),
                Unary::Affine(s, b) => v * F::c(s) + F::c(b),
                Unary::Powf(p) => v.powf(F::c(p)),
                Unary::Clamp(lo, hi) => v.max(F::c(lo)).min(F::c(hi)),
            })
            .collect();
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor { shape, data }, Op::Unary { x, kind }, ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    /// `x·scale + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Unary::Affine(scale, shift))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Unary::Affine(s, 0.0))
    }

    /// `x^p` for positive `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Unary::Powf(p))
    }

    /// Gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    // ── normalisation ───────────────────────────────────────────────

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::dim(op, self.shape(x), &[axis]));
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let xv = self.value(x);
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut data = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut sum = F::zero();
                for j in 0..len {
                    let e = (src[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                let inv = F::one() / sum;
                for j in 0..len {
                    data[base + j * inner] *= inv;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data }, Op::Softmax { x, outer, len, inner }, ng))
    }

    /// Layer normalisation along `axis` with epsilon `1e-5` added to the
    /// variance, followed by the per-feature `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "layer_norm")?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        if self.shape(gain) != [len] || self.shape(bias) != [len] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![F::zero(); src.len()];
        let mut data = vec![F::zero(); src.len()];
        let mut inv_std = vec![F::zero(); outer * inner];
        let lenf = F::c(len as f64);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mean = F::zero();
                for j in 0..len {
                    mean += src[base + j * inner];
                }
                mean = mean / lenf;
                let mut var = F::zero();
                for j in 0..len {
                    let d = src[base + j * inner] - mean;
                    var += d * d;
                }
                var = var / lenf;
                let is = F::one() / (var + F::c(LN_EPS)).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..len {
                    let p = base + j * inner;
                    let h = (src[p] - mean) * is;
                    xhat[p] = h;
                    data[p] = h * g[j] + b[j];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNorm {
                x,
                gain,
                bias,
                outer,
                len,
                inner,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Standardises each last-axis row over the entries where `valid` is
    /// true (same length as `x`); invalid entries become exactly zero.
    pub fn masked_standardize(&mut self, x: Var, valid: Vec<bool>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if valid.len() != numel(&shape) || shape.is_empty() {
            return Err(Error::dim("masked_standardize", &shape, &[valid.len()]));
        }
        let len = *shape.last().unwrap();
        let rows = valid.len() / len;
        let src = self.value(x).data();
        let mut xhat = vec![F::zero(); src.len()];
        let mut inv_std = vec![F::zero(); rows];
        for r in 0..rows {
            let span = r * len..(r + 1) * len;
            let cnt = valid[span.clone()].iter().filter(|&&v| v).count();
            if cnt == 0 {
                return Err(Error::MaskedRow { row: r });
            }
            let cntf = F::c(cnt as f64);
            let mut mean = F::zero();
            for p in span.clone() {
                if valid[p] {
                    mean += src[p];
                }
            }
            mean = mean / cntf;
            let mut var = F::zero();
            for p in span.clone() {
                if valid[p] {
                    let d = src[p] - mean;
                    var += d * d;
                }
            }
            let is = F::one() / (var / cntf + F::c(LN_EPS)).sqrt();
            inv_std[r] = is;
            for p in span {
                if valid[p] {
                    xhat[p] = (src[p] - mean) * is;
                }
            }
        }
        let data = xhat.clone();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor { shape, data },
            Op::Standardize {
                x,
                valid,
                len,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    // ── temporal windows ────────────────────────────────────────────

    /// Trailing-window pooling along the leading (time) axis. Output row `t`
    /// (0-based) reduces rows `max(0, t+1-window)..=t`. Max routes its
    /// gradient to the earliest row attaining the maximum; mean divides by
    /// the clipped window length.
    pub fn window_pool(&mut self, x: Var, pool: Pool, window: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::dim("window_pool", &shape, &[window]));
        }
        if window == 0 {
            return Err(Error::Contract("window length must be at least 1".into()));
        }
        let steps = shape[0];
        let width = numel(&shape) / steps;
        let src = self.value(x).data();
        let mut data = vec![F::zero(); src.len()];
        let mut argmax = Vec::new();
        match pool {
            Pool::Max => {
                argmax = vec![0u32; src.len()];
                for t in 0..steps {
                    let lo = (t + 1).saturating_sub(window);
                    for c in 0..width {
                        let mut best = src[lo * width + c];
                        let mut at = lo;
                        for s in lo + 1..=t {
                            let v = src[s * width + c];
                            if v > best {
                                best = v;
                                at = s;
                            }
                        }
                        data[t * width + c] = best;
                        argmax[t * width + c] = at as u32;
                    }
                }
            }
            Pool::Mean => {
                for t in 0..steps {
                    let lo = (t + 1).saturating_sub(window);
                    let count = F::c((t + 1 - lo) as f64);
                    for c in 0..width {
                        let mut acc = F::zero();
                        for s in lo..=t {
                            acc += src[s * width + c];
                        }
                        data[t * width + c] = acc / count;
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor { shape, data },
            Op::WindowPool {
                x,
                pool,
                window,
                steps,
                width,
                argmax,
            },
            ng,
        ))
    }

    /// Max over the clipped window ending at 1-based frame `t`.
    pub fn reduce_max_window(&mut self, x: Var, t: usize, window: usize) -> Result<Var> {
        self.reduce_window(x, t, window, Pool::Max)
    }

    /// Mean over the clipped window ending at 1-based frame `t`.
    pub fn reduce_mean_window(&mut self, x: Var, t: usize, window: usize) -> Result<Var> {
        self.reduce_window(x, t, window, Pool::Mean)
    }

    fn reduce_window(&mut self, x: Var, t: usize, window: usize, pool: Pool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let steps = shape.first().copied().unwrap_or(0);
        if t == 0 || t > steps {
            return Err(Error::Index(format!("frame {t} outside 1..={steps}")));
        }
        let pooled = self.window_pool(x, pool, window)?;
        let row = self.narrow(pooled, 0, t - 1, 1)?;
        self.reshape(row, &shape[1..])
    }

    // ── layout ──────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape { x }, ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = self.value(x).data();
        let total = src.len();
        let mut data = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd];
        let mut pos = 0usize;
        for _ in 0..total {
            data.push(src[pos]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                pos += eff[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                pos -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor { shape: out_shape, data },
            Op::Permute { x, perm: perm.to_vec() },
            ng,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::dim("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total_len: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total_len;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                lens,
                outer,
                inner,
            },
            ng,
        ))
    }

    /// Slice `start..start+count` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, count: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || count == 0 || start + count > shape[axis] {
            return Err(Error::Index(format!(
                "narrow {start}..{} of axis {axis} in {shape:?}",
                start + count
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let b = (o * len + start) * inner;
            data.extend_from_slice(&src[b..b + count * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = count;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor { shape: out_shape, data },
            Op::Narrow {
                x,
                outer,
                len,
                inner,
                start,
                count,
            },
            ng,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Propagates d(root)/d(·) to every differentiable leaf reachable from
    /// `root`, adding into previously stored gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<F>>> = Vec::new();
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(vec![F::one()]);
        let mut collected: Vec<(usize, Vec<F>)> = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) || i == root.0 {
                collected.push((i, g.clone()));
            }
            self.propagate(i, &g, &mut adj);
        }
        for (i, g) in collected {
            match self.grads.get_mut(&i) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => {
                    self.grads.insert(i, g);
                }
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(adj[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[F], adj: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(adj, *a) {
                    for bi in 0..*batch {
                        let ao = if *a_batched { bi * m * k } else { 0 };
                        let bo = if *b_batched { bi * k * n } else { 0 };
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.slot(adj, *b) {
                    for bi in 0..*batch {
                        let ao = if *a_batched { bi * m * k } else { 0 };
                        let bo = if *b_batched { bi * k * n } else { 0 };
                        gemm_tn(
                            &av[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Binary { a, b, kind, bcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ia = |e: usize| match bcast {
                    Bcast::Same | Bcast::Suffix(_) => e,
                    Bcast::General { ia, .. } => ia[e],
                };
                let ib = |e: usize| match bcast {
                    Bcast::Same => e,
                    Bcast::Suffix(len) => e % len,
                    Bcast::General { ib, .. } => ib[e],
                };
                if let Some(ga) = self.slot(adj, *a) {
                    for (e, &ge) in g.iter().enumerate() {
                        ga[ia(e)] += match kind {
                            BinKind::Add | BinKind::Sub => ge,
                            BinKind::Mul => ge * bv[ib(e)],
                        };
                    }
                }
                if let Some(gb) = self.slot(adj, *b) {
                    for (e, &ge) in g.iter().enumerate() {
                        gb[ib(e)] += match kind {
                            BinKind::Add => ge,
                            BinKind::Sub => -ge,
                            BinKind::Mul => ge * av[ia(e)],
                        };
                    }
                }
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(adj, *x) {
                    for e in 0..g.len() {
                        let v = xv[e];
                        let d = match *kind {
                            Unary::Exp => out[e],
                            Unary::Log => F::one() / v,
                            Unary::Sigmoid => out[e] * (F::one() - out[e]),
                            Unary::Gelu => phi_cdf(v) + v * phi_pdf(v),
                            Unary::Affine(s, _) => F::c(s),
                            Unary::Powf(p) => {
                                if p == 0.0 {
                                    F::zero()
                                } else {
                                    F::c(p) * v.powf(F::c(p - 1.0))
                                }
                            }
                            Unary::Clamp(lo, hi) => {
                                if v >= F::c(lo) && v <= F::c(hi) {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                        };
                        gx[e] += g[e] * d;
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if let Some(gx) = self.slot(adj, *x) {
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let base = o * len * inner + ii;
                            let mut dot = F::zero();
                            for j in 0..*len {
                                let p = base + j * inner;
                                dot += g[p] * out[p];
                            }
                            for j in 0..*len {
                                let p = base + j * inner;
                                gx[p] += out[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                outer,
                len,
                inner,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                if let Some(gg) = self.slot(adj, *gain) {
                    for (p, (&ge, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[(p / inner) % len] += ge * h;
                    }
                }
                if let Some(gb) = self.slot(adj, *bias) {
                    for (p, &ge) in g.iter().enumerate() {
                        gb[(p / inner) % len] += ge;
                    }
                }
                if let Some(gx) = self.slot(adj, *x) {
                    let lenf = F::c(*len as f64);
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let base = o * len * inner + ii;
                            let mut s1 = F::zero();
                            let mut s2 = F::zero();
                            for j in 0..*len {
                                let p = base + j * inner;
                                let dh = g[p] * gv[j];
                                s1 += dh;
                                s2 += dh * xhat[p];
                            }
                            let is = inv_std[o * inner + ii];
                            for j in 0..*len {
                                let p = base + j * inner;
                                let dh = g[p] * gv[j];
                                gx[p] += is / lenf * (lenf * dh - s1 - xhat[p] * s2);
                            }
                        }
                    }
                }
            }
            Op::Standardize {
                x,
                valid,
                len,
                xhat,
                inv_std,
            } => {
                if let Some(gx) = self.slot(adj, *x) {
                    let rows = valid.len() / len;
                    for r in 0..rows {
                        let span = r * len..(r + 1) * len;
                        let cnt = valid[span.clone()].iter().filter(|&&v| v).count();
                        let cntf = F::c(cnt as f64);
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for p in span.clone() {
                            if valid[p] {
                                s1 += g[p];
                                s2 += g[p] * xhat[p];
                            }
                        }
                        for p in span {
                            if valid[p] {
                                gx[p] += inv_std[r] / cntf * (cntf * g[p] - s1 - xhat[p] * s2);
                            }
                        }
                    }
                }
            }
            Op::WindowPool {
                x,
                pool,
                window,
                steps,
                width,
                argmax,
            } => {
                if let Some(gx) = self.slot(adj, *x) {
                    match pool {
                        Pool::Max => {
                            for (p, &ge) in g.iter().enumerate() {
                                let c = p % width;
                                gx[argmax[p] as usize * width + c] += ge;
                            }
                        }
                        Pool::Mean => {
                            for t in 0..*steps {
                                let lo = (t + 1).saturating_sub(*window);
                                let inv = F::one() / F::c((t + 1 - lo) as f64);
                                for c in 0..*width {
                                    let ge = g[t * width + c] * inv;
                                    for s in lo..=t {
                                        gx[s * width + c] += ge;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Permute { x, perm } => {
                if let Some(gx) = self.slot(adj, *x) {
                    let in_shape = self.shape(*x);
                    let nd = in_shape.len();
                    let out_shape = node.value.shape();
                    let in_strides = strides(in_shape);
                    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                    let mut idx = vec![0usize; nd];
                    let mut pos = 0usize;
                    for &ge in g {
                        gx[pos] += ge;
                        for ax in (0..nd).rev() {
                            idx[ax] += 1;
                            pos += eff[ax];
                            if idx[ax] < out_shape[ax] {
                                break;
                            }
                            pos -= eff[ax] * idx[ax];
                            idx[ax] = 0;
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                lens,
                outer,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut off = 0;
                for (&p, &l) in parts.iter().zip(lens) {
                    if let Some(gp) = self.slot(adj, p) {
                        for o in 0..*outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + l) * inner];
                            let dst = &mut gp[o * l * inner..(o + 1) * l * inner];
                            dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                        }
                    }
                    off += l;
                }
            }
            Op::Narrow {
                x,
                outer,
                len,
                inner,
                start,
                count,
            } => {
                if let Some(gx) = self.slot(adj, *x) {
                    for o in 0..*outer {
                        let b = (o * len + start) * inner;
                        let src = &g[o * count * inner..(o + 1) * count * inner];
                        gx[b..b + count * inner].iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }
}
