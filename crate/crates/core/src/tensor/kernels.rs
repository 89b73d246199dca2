//! Plain CPU loops behind the tape operations.

use super::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            // Eight independent partial sums let the loop vectorise.
            let mut lanes = [F::zero(); 8];
            let (ax, ar) = arow.split_at(n - n % 8);
            let (bx, br) = brow.split_at(n - n % 8);
            for (x8, y8) in ax.chunks_exact(8).zip(bx.chunks_exact(8)) {
                for l in 0..8 {
                    lanes[l] += x8[l] * y8[l];
                }
            }
            let mut acc = lanes.iter().fold(F::zero(), |s, &v| s + v);
            for (&x, &y) in ar.iter().zip(br) {
                acc += x * y;
            }
            *cv += acc;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Standard normal CDF.
#[inline]
pub(crate) fn phi_cdf<F: Real>(x: F) -> F {
    F::c(0.5) * (F::one() + (x * F::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Standard normal density.
#[inline]
pub(crate) fn phi_pdf<F: Real>(x: F) -> F {
    F::c(0.398_942_280_401_432_7) * (-(x * x) * F::c(0.5)).exp()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each element of an `out_shape` tensor, the flat index of the
/// broadcast source element in a tensor of `src_shape`.
pub(crate) fn broadcast_index(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let offset = nd - src_shape.len();
    let src_strides = strides(src_shape);
    let mut eff = vec![0usize; nd];
    for i in 0..src_shape.len() {
        if src_shape[i] != 1 {
            eff[offset + i] = src_strides[i];
        }
    }
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut pos = 0usize;
    for _ in 0..total {
        out.push(pos);
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
    out
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
