//! Multi-scale module: parallel short-term max, mid-term mean and
//! long-term prefix-max pooling of frame features, each fused back with the
//! projected frame and a residual from the raw input.
//!
//! All windows look strictly backward, so the module is causal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{join, Linear};
use crate::tensor::{Pool, Real, Tape, Tensor, Var};

/// Temporal scale of a pooled branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Short,
    Mid,
    Long,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Short, Scale::Mid, Scale::Long];

    pub fn name(self) -> &'static str {
        match self {
            Scale::Short => "short",
            Scale::Mid => "mid",
            Scale::Long => "long",
        }
    }
}

/// `w_s = max(1, round(fps/3))` (halves round up), `w_m = fps`.
pub fn window_sizes_from_fps(fps: u32) -> Result<(usize, usize)> {
    if fps < 1 {
        return Err(Error::Config("fps must be at least 1".into()));
    }
    let short = ((fps as f64 / 3.0) + 0.5).floor().max(1.0) as usize;
    Ok((short, fps as usize))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiScaleConfig {
    pub short_window: usize,
    pub mid_window: usize,
    pub d: usize,
}

impl MultiScaleConfig {
    pub fn new(short_window: usize, mid_window: usize, d: usize) -> Result<Self> {
        if short_window < 1 || short_window > mid_window {
            return Err(Error::Config(format!(
                "need 1 <= short window ({short_window}) <= mid window ({mid_window})"
            )));
        }
        Ok(MultiScaleConfig {
            short_window,
            mid_window,
            d,
        })
    }

    pub fn from_fps(fps: u32, d: usize) -> Result<Self> {
        let (s, m) = window_sizes_from_fps(fps)?;
        Self::new(s, m, d)
    }
}

/// Projection `f' = W f + B` plus one fusion layer `[2d → d]` per scale
/// (or a single shared one).
#[derive(Debug, Clone, PartialEq)]
pub struct MsmParams<P> {
    pub proj: Linear<P>,
    pub fuse: Vec<Linear<P>>,
}

impl<P> MsmParams<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> MsmParams<Q> {
        MsmParams {
            proj: self.proj.map(f),
            fuse: self.fuse.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        self.proj.visit(&join(prefix, "proj"), f);
        for (i, l) in self.fuse.iter().enumerate() {
            l.visit(&join(prefix, &format!("fuse.{i}")), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        for (i, l) in self.fuse.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("fuse.{i}")), f);
        }
    }
}

impl<F: Real> MsmParams<Tensor<F>> {
    /// `n_fuse` is the number of enabled scales, or 1 when fusion is shared.
    pub fn init<R: Rng>(rng: &mut R, d: usize, n_fuse: usize) -> Self {
        MsmParams {
            proj: Linear::init(rng, d, d),
            fuse: (0..n_fuse).map(|_| Linear::init(rng, 2 * d, d)).collect(),
        }
    }

    pub fn count(d: usize, n_fuse: usize) -> usize {
        d * d + d + n_fuse * (2 * d * d + d)
    }
}

/// Pooled representation of `f'` (`[T, d]`) at one scale.
pub fn pool_scale<F: Real>(tape: &mut Tape<F>, projected: Var, scale: Scale, cfg: &MultiScaleConfig) -> Result<Var> {
    let steps = tape.shape(projected)[0];
    match scale {
        Scale::Short => tape.window_pool(projected, Pool::Max, cfg.short_window),
        Scale::Mid => tape.window_pool(projected, Pool::Mean, cfg.mid_window),
        Scale::Long => tape.window_pool(projected, Pool::Max, steps),
    }
}

/// Runs the multi-scale module over frame features `[T, d]` for each
/// requested scale, returning `F̂_p` (`[T, d]`) in the same order.
///
/// `params.fuse` holds either one layer per requested scale or a single
/// shared layer.
pub fn msm_forward<F: Real>(
    tape: &mut Tape<F>,
    frames: Var,
    cfg: &MultiScaleConfig,
    params: &MsmParams<Var>,
    scales: &[Scale],
) -> Result<Vec<Var>> {
    let shape = tape.shape(frames).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("msm", &shape, &[0, cfg.d]));
    }
    if shape[0] == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }
    if shape[1] != cfg.d {
        return Err(Error::dim("msm", &shape, &[shape[0], cfg.d]));
    }
    if params.fuse.len() != 1 && params.fuse.len() != scales.len() {
        return Err(Error::Config(format!(
            "{} fusion layers for {} scales",
            params.fuse.len(),
            scales.len()
        )));
    }
    let projected = params.proj.forward(tape, frames)?;
    let mut out = Vec::with_capacity(scales.len());
    for (i, &scale) in scales.iter().enumerate() {
        let pooled = pool_scale(tape, projected, scale, cfg)?;
        let cat = tape.concat(&[pooled, projected], 1)?;
        let fuse = &params.fuse[if params.fuse.len() == 1 { 0 } else { i }];
        let fused = fuse.forward(tape, cat)?;
        out.push(tape.add(fused, frames)?);
    }
    Ok(out)
}
