use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::artifacts::video_predictions;
use super::optim::AdamW;
use super::{RunConfig, Splits};
use crate::error::{Error, Result};
use crate::feature_io::SequenceRecord;
use crate::loss::{loss_on_tape, SequenceTarget};
use crate::metrics::{evaluate, EvalOptions, EvalReport};
use crate::model::{forward_record, save_checkpoint, Component, MsfinParams};
use crate::synthetic::splitmix64;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sequence loss over the epoch.
    pub train_loss: f64,
    pub val_ap: Option<f64>,
    pub val_mtta: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub seed: u64,
    pub config_hash: String,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_ap: Option<f64>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub params: MsfinParams<Tensor<f32>>,
    /// Parameters of the epoch with the highest validation AP.
    pub best: Option<MsfinParams<Tensor<f32>>>,
    pub log: TrainingLog,
}

/// Mean over the batch of per-sequence losses, and its gradient for every
/// parameter in visiting order.
pub fn batch_gradients(
    params: &MsfinParams<Tensor<f32>>,
    batch: &[&SequenceRecord],
    cfg: &RunConfig,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut tape = Tape::<f32>::new();
    let p = params.leaves(&mut tape);
    let mut total = None;
    for rec in batch {
        let out = forward_record(&mut tape, rec, &p, &cfg.model)?;
        let target = SequenceTarget {
            label: rec.label,
            t_ao: rec.t_ao,
        };
        let l = loss_on_tape(&mut tape, out.probs, &target, rec.fps as f64, &cfg.loss)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let mean = tape.scale(total.unwrap(), 1.0 / batch.len() as f64);
    tape.backward(mean)?;
    let mut grads = Vec::new();
    p.visit(&mut |_, v| grads.push(tape.grad_or_zero(*v)));
    Ok((tape.value(mean).item() as f64, grads))
}

fn grad_norm(grads: &[Tensor<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Validation report, or `None` when the set has no positive video.
fn validate_on(
    params: &MsfinParams<Tensor<f32>>,
    cfg: &RunConfig,
    test: &[SequenceRecord],
) -> Result<Option<EvalReport>> {
    if !test.iter().any(|r| r.is_positive()) {
        return Ok(None);
    }
    let videos = video_predictions(params, &cfg.model, test)?;
    Ok(Some(evaluate(&videos, &EvalOptions::default())?))
}

/// Mini-batch AdamW training.
///
/// Deterministic given the config: parameters come from a ChaCha8 stream
/// seeded with `seed`, each epoch's batch order from a second stream seeded
/// with `splitmix64(seed)`, and per-batch losses are summed in batch order.
/// With `out_dir`, writes the effective config, per-epoch and best-AP
/// checkpoints, the final checkpoint and `training_log.json`.
pub fn train(cfg: &RunConfig, splits: &Splits, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with(cfg, splits, out_dir, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    cfg: &RunConfig,
    splits: &Splits,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    for r in splits.train.iter().chain(&splits.test) {
        r.validate()?;
        super::check_shape(r, &cfg.model)?;
    }
    let hash = cfg.hash();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        std::fs::write(dir.join("effective_config.json"), cfg.to_pretty_json())?;
    }
    let mut params = MsfinParams::<Tensor<f32>>::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed));
    let mut opt = AdamW::new(cfg.optimizer.clone())?;
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut log = TrainingLog {
        seed: cfg.seed,
        config_hash: hash,
        n_train: splits.train.len(),
        n_test: splits.test.len(),
        epochs: Vec::new(),
        best_epoch: None,
        best_ap: None,
    };
    let mut best = None;
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SequenceRecord> = chunk.iter().map(|&i| &splits.train[i]).collect();
            // Inputs are known to be finite, so a non-finite activation means divergence.
            let (loss, grads) = match batch_gradients(&params, &batch, cfg) {
                Err(Error::Contract(m)) if m.contains("non-finite") => (f64::NAN, Vec::new()),
                other => other?,
            };
            let norm = if grads.is_empty() { f64::NAN } else { grad_norm(&grads) };
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Numerical {
                    epoch,
                    batch: b + 1,
                    loss,
                    grad_norm: norm,
                });
            }
            loss_sum += loss * batch.len() as f64;
            opt.step_model(&mut params, &grads)?;
        }
        let report = validate_on(&params, cfg, &splits.test)?;
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / splits.train.len() as f64,
            val_ap: report.as_ref().map(|r| r.ap),
            val_mtta: report.as_ref().map(|r| r.mtta_seconds),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        let improved = match (row.val_ap, log.best_ap) {
            (Some(ap), Some(b)) => ap > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            log.best_ap = row.val_ap;
            log.best_epoch = Some(epoch);
            best = Some(params.clone());
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every_epoch {
                save_checkpoint(
                    dir.join(format!("checkpoints/epoch_{epoch:03}.msfn")),
                    &cfg.model,
                    &params,
                )?;
            }
            if improved {
                save_checkpoint(dir.join("best.msfn"), &cfg.model, &params)?;
            }
        }
        on_epoch(&row);
        log.epochs.push(row);
    }
    if let Some(dir) = out_dir {
        save_checkpoint(dir.join("final.msfn"), &cfg.model, &params)?;
        std::fs::write(dir.join("training_log.json"), serde_json::to_string_pretty(&log)?)?;
    }
    Ok(TrainOutcome { params, best, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub experiment: String,
    pub disabled: Vec<Component>,
    pub ap: f64,
    pub mtta_seconds: f64,
    pub ap_at_80r: f64,
    pub tta_at_80r_seconds: Option<f64>,
}

/// Baseline plus one run per switch set, all with the base seed and the
/// same split; each model is evaluated after its last epoch. Every
/// configuration is validated before any training starts.
pub fn ablate(base: &RunConfig, switches: &[Vec<Component>], splits: &Splits) -> Result<Vec<AblationRow>> {
    let mut runs = vec![(String::from("full"), Vec::new(), base.clone())];
    for set in switches {
        let mut cfg = base.clone();
        cfg.model.disable.extend(set.iter().copied());
        cfg.validate()?;
        let name = set.iter().map(|c| c.name()).collect::<Vec<_>>().join("+");
        runs.push((format!("w/o {name}"), set.clone(), cfg));
    }
    base.validate()?;
    let mut rows = Vec::new();
    for (experiment, disabled, cfg) in runs {
        let out = train(&cfg, splits, None)?;
        let videos = video_predictions(&out.params, &cfg.model, &splits.test)?;
        let r = evaluate(&videos, &EvalOptions::default())?;
        rows.push(AblationRow {
            experiment,
            disabled,
            ap: r.ap,
            mtta_seconds: r.mtta_seconds,
            ap_at_80r: r.ap_at_80r,
            tta_at_80r_seconds: r.tta_at_80r_seconds,
        });
    }
    Ok(rows)
}

/// `experiment,ap,mtta_s,ap_80r,tta_80r_s`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("experiment,ap,mtta_s,ap_80r,tta_80r_s\n");
    for r in rows {
        let tta = r.tta_at_80r_seconds.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.experiment, r.ap, r.mtta_seconds, r.ap_at_80r, tta
        );
    }
    s
}
