//! Parameter containers generic over their leaf type.
//!
//! The same structure holds `Tensor<F>` values at rest and tape [`Var`]s
//! during a forward pass; `map` converts between them and `visit` yields
//! stable dotted names in a fixed order (used by the optimizer, checkpoints
//! and gradient checks).

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform in `±sqrt(1/fan_in)`.
pub(crate) fn init_uniform<F: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::c(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("valid init shape")
}

/// Affine map `x·w + b` with `w: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub w: P,
    pub b: P,
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Linear<Q> {
        Linear {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

impl<F: Real> Linear<Tensor<F>> {
    pub fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: init_uniform(rng, &[fan_in, fan_out], fan_in),
            b: init_uniform(rng, &[fan_out], fan_in),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::zeros([fan_in, fan_out]),
            b: Tensor::zeros([fan_out]),
        }
    }
}

/// Layer-norm gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm<P> {
    pub gain: P,
    pub bias: P,
}

impl<P> Norm<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Norm<Q> {
        Norm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<F: Real> Norm<Tensor<F>> {
    pub fn identity(width: usize) -> Self {
        Norm {
            gain: Tensor::full([width], F::one()),
            bias: Tensor::zeros([width]),
        }
    }
}

impl Linear<Var> {
    /// `x·w + b` over the last axis of `x` (rank ≥ 2).
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add(y, self.b)
    }
}

impl Norm<Var> {
    /// Layer norm over the last axis.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let axis = tape.shape(x).len() - 1;
        tape.layer_norm(x, self.gain, self.bias, axis)
    }
}
