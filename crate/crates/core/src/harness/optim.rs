use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MsfinParams;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Only `adamw` is recognised.
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            name: "adamw".into(),
            lr: 1e-4,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name != "adamw" {
            return Err(Error::Config(format!("unknown optimizer `{}`", self.name)));
        }
        let [b1, b2] = self.betas;
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("lr, weight_decay must be >= 0 and eps > 0".into()));
        }
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("betas {:?} outside [0, 1)", self.betas)));
        }
        Ok(())
    }
}

/// Decoupled weight decay Adam:
///
/// ```text
/// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
/// θ ← θ − lr·(m/(1−β1^k) / (sqrt(v/(1−β2^k)) + ε) + λ·θ)
/// ```
///
/// Moments are kept in `f64` whatever the parameter precision.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u32,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One update; `params` and `grads` pair up by position and must keep
    /// the same layout across calls.
    pub fn step<F: Real>(&mut self, params: &mut [&mut Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        self.begin(params.iter().map(|p| p.len()), grads.len())?;
        for (i, p) in params.iter_mut().enumerate() {
            self.update(i, p, &grads[i])?;
        }
        Ok(())
    }

    /// [`AdamW::step`] over every tensor of a model, in visiting order.
    pub fn step_model<F: Real>(&mut self, params: &mut MsfinParams<Tensor<F>>, grads: &[Tensor<F>]) -> Result<()> {
        let mut lens = Vec::new();
        params.visit(&mut |_, t| lens.push(t.len()));
        self.begin(lens.into_iter(), grads.len())?;
        let mut i = 0;
        let mut res = Ok(());
        params.visit_mut(&mut |_, p| {
            if res.is_ok() {
                res = self.update(i, p, &grads[i]);
            }
            i += 1;
        });
        res
    }

    fn begin(&mut self, lens: impl ExactSizeIterator<Item = usize>, n_grads: usize) -> Result<()> {
        if lens.len() != n_grads {
            return Err(Error::Contract(format!("{} params but {} grads", lens.len(), n_grads)));
        }
        if self.m.is_empty() {
            self.m = lens.map(|n| vec![0.0; n]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != n_grads {
            return Err(Error::Contract("parameter layout changed between steps".into()));
        }
        self.step += 1;
        Ok(())
    }

    fn update<F: Real>(&mut self, i: usize, p: &mut Tensor<F>, g: &Tensor<F>) -> Result<()> {
        if p.shape() != g.shape() || self.m[i].len() != p.len() {
            return Err(Error::dim("adamw", p.shape(), g.shape()));
        }
        let OptimizerConfig {
            lr,
            weight_decay,
            betas: [b1, b2],
            eps,
            ..
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        for (j, (x, g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let g = g.f64();
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let theta = x.f64();
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps) + weight_decay * theta;
            *x = F::c(theta - lr * update);
        }
        Ok(())
    }
}
