//! Correctness and earliness metrics over per-frame risk curves.
//!
//! A video counts as predicted positive at threshold `τ` when some frame up
//! to its horizon reaches `τ`; the horizon is `t_ao` for positives and the
//! last frame for negatives. Frames after `t_ao` never influence a metric.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub probs: Vec<f64>,
    pub label: u8,
    /// 1-based accident frame (positives).
    pub t_ao: Option<u32>,
    pub fps: u32,
}

impl VideoPrediction {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.is_empty() || self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Contract("probabilities must be non-empty and in [0, 1]".into()));
        }
        if self.fps == 0 {
            return Err(Error::Contract("fps must be positive".into()));
        }
        match (self.label, self.t_ao) {
            (0, _) => Ok(()),
            (1, Some(t)) if t >= 1 && t as usize <= self.probs.len() => Ok(()),
            _ => Err(Error::Contract(format!(
                "label {} with t_ao {:?} over {} frames",
                self.label,
                self.t_ao,
                self.probs.len()
            ))),
        }
    }

    /// Number of leading frames that may trigger a detection.
    pub fn horizon(&self) -> usize {
        match self.t_ao {
            Some(t) if self.is_positive() => t as usize,
            _ => self.probs.len(),
        }
    }

    /// Highest probability within the horizon.
    pub fn score(&self) -> f64 {
        self.probs[..self.horizon()].iter().copied().fold(0.0, f64::max)
    }
}

/// Video-level decision at threshold `τ` (ties count as detections).
pub fn video_score_at_threshold(v: &VideoPrediction, tau: f64) -> bool {
    v.probs[..v.horizon()].iter().any(|&p| p >= tau)
}

/// Seconds between the first crossing at or before `t_ao` and `t_ao`;
/// `None` when nothing crosses or the video is negative.
pub fn tta(v: &VideoPrediction, tau: f64) -> Option<f64> {
    let t_ao = v.t_ao.filter(|_| v.is_positive())? as usize;
    let first = v.probs[..t_ao].iter().position(|&p| p >= tau)? + 1;
    Some((t_ao - first) as f64 / v.fps as f64)
}

/// `{0.01, 0.02, …, 0.99}`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=99).map(|k| k as f64 / 100.0).collect()
}

fn check(videos: &[VideoPrediction]) -> Result<usize> {
    for v in videos {
        v.validate()?;
    }
    let positives = videos.iter().filter(|v| v.is_positive()).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("no positive videos".into()));
    }
    Ok(positives)
}

/// Counts at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Confusion {
    tp: usize,
    fp: usize,
    positives: usize,
    tta_sum: f64,
}

impl Confusion {
    fn at(videos: &[VideoPrediction], tau: f64) -> Self {
        let mut c = Confusion {
            tp: 0,
            fp: 0,
            positives: 0,
            tta_sum: 0.0,
        };
        for v in videos {
            if v.is_positive() {
                c.positives += 1;
                if let Some(s) = tta(v, tau) {
                    c.tp += 1;
                    c.tta_sum += s;
                }
            } else if video_score_at_threshold(v, tau) {
                c.fp += 1;
            }
        }
        c
    }

    /// Precision, with 1 when nothing is predicted positive.
    fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    fn recall(&self) -> f64 {
        self.tp as f64 / self.positives as f64
    }

    fn mean_tta(&self) -> Option<f64> {
        (self.tp > 0).then(|| self.tta_sum / self.tp as f64)
    }
}

/// Distinct scores, descending.
fn score_thresholds(scores: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut s: Vec<f64> = scores.collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.dedup();
    s
}

/// `Σ_n (R_n − R_{n−1})·P_n` over `(score, is_positive)` samples, sweeping
/// the distinct scores in descending order.
pub fn average_precision_of_scores(samples: &[(f64, bool)]) -> Result<f64> {
    let positives = samples.iter().filter(|s| s.1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("no positive samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let tau = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == tau {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Video-level AP.
pub fn average_precision(videos: &[VideoPrediction]) -> Result<f64> {
    check(videos)?;
    let samples: Vec<(f64, bool)> = videos.iter().map(|v| (v.score(), v.is_positive())).collect();
    average_precision_of_scores(&samples)
}

/// Frame-level AP: every frame within the horizon is a sample carrying its
/// video's label.
pub fn frame_level_average_precision(videos: &[VideoPrediction]) -> Result<f64> {
    check(videos)?;
    let samples: Vec<(f64, bool)> = videos
        .iter()
        .flat_map(|v| v.probs[..v.horizon()].iter().map(move |&p| (p, v.is_positive())))
        .collect();
    average_precision_of_scores(&samples)
}

/// How thresholds without any true positive enter the mTTA average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyThreshold {
    #[default]
    Skip,
    CountAsZero,
}

/// Mean over thresholds of the mean TTA of the true positives.
pub fn mtta(videos: &[VideoPrediction], thresholds: &[f64], empty: EmptyThreshold) -> Result<f64> {
    check(videos)?;
    let (mut sum, mut used, mut any) = (0.0, 0usize, false);
    for &tau in thresholds {
        match Confusion::at(videos, tau).mean_tta() {
            Some(m) => {
                sum += m;
                used += 1;
                any = true;
            }
            None if empty == EmptyThreshold::CountAsZero => used += 1,
            None => {}
        }
    }
    if !any {
        return Err(Error::UndefinedMetric("no detection at any threshold".into()));
    }
    Ok(sum / used as f64)
}

/// Operating point at a target recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtRecall {
    pub precision: f64,
    pub recall: f64,
    /// Mean TTA of the true positives (`None` without any).
    pub mean_tta_seconds: Option<f64>,
    pub threshold: f64,
    /// False when the target was never reached and the smallest threshold
    /// was used instead.
    pub reached: bool,
}

/// The largest candidate threshold whose recall reaches `target`, chosen
/// among `thresholds`.
pub fn at_recall_on(videos: &[VideoPrediction], target: f64, thresholds: &[f64]) -> Result<AtRecall> {
    check(videos)?;
    let mut cands = thresholds.to_vec();
    if cands.is_empty() {
        return Err(Error::Contract("no candidate thresholds".into()));
    }
    cands.sort_by(|a, b| b.total_cmp(a));
    let point = |tau: f64, reached: bool| {
        let c = Confusion::at(videos, tau);
        AtRecall {
            precision: c.precision(),
            recall: c.recall(),
            mean_tta_seconds: c.mean_tta(),
            threshold: tau,
            reached,
        }
    };
    for &tau in &cands {
        if Confusion::at(videos, tau).recall() >= target {
            return Ok(point(tau, true));
        }
    }
    Ok(point(*cands.last().unwrap(), false))
}

/// [`at_recall_on`] over the distinct video scores, which contain every
/// point where recall changes.
pub fn at_recall(videos: &[VideoPrediction], target: f64) -> Result<AtRecall> {
    check(videos)?;
    let cands = score_thresholds(videos.iter().map(|v| v.score()));
    at_recall_on(videos, target, &cands)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub mean_tta_seconds: Option<f64>,
}

/// One row per threshold, ascending.
pub fn mtta_ap_curve(videos: &[VideoPrediction], thresholds: &[f64]) -> Result<Vec<CurveRow>> {
    check(videos)?;
    let mut taus = thresholds.to_vec();
    taus.sort_by(|a, b| a.total_cmp(b));
    Ok(taus
        .into_iter()
        .map(|tau| {
            let c = Confusion::at(videos, tau);
            CurveRow {
                threshold: tau,
                precision: c.precision(),
                recall: c.recall(),
                mean_tta_seconds: c.mean_tta(),
            }
        })
        .collect())
}

/// `threshold,precision,recall,mean_tta_s`; an empty TTA field means no
/// true positive.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("threshold,precision,recall,mean_tta_s\n");
    for r in rows {
        let tta = r.mean_tta_seconds.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.threshold, r.precision, r.recall, tta);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub thresholds: Vec<f64>,
    pub empty_threshold: EmptyThreshold,
    pub target_recall: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            thresholds: default_thresholds(),
            empty_threshold: EmptyThreshold::Skip,
            target_recall: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap_at_80r: f64,
    pub mtta_seconds: f64,
    pub tta_at_80r_seconds: Option<f64>,
    pub threshold_at_80r: f64,
    pub recall_at_80r: f64,
    pub reached_80r: bool,
    pub n_videos: usize,
    pub n_positive: usize,
    pub curve: Vec<CurveRow>,
}

/// Every metric at once. A set without any detection reports an mTTA of 0.
pub fn evaluate(videos: &[VideoPrediction], opts: &EvalOptions) -> Result<EvalReport> {
    let n_positive = check(videos)?;
    let op = at_recall(videos, opts.target_recall)?;
    let mtta_seconds = match mtta(videos, &opts.thresholds, opts.empty_threshold) {
        Err(Error::UndefinedMetric(_)) => 0.0,
        other => other?,
    };
    Ok(EvalReport {
        ap: average_precision(videos)?,
        ap_at_80r: op.precision,
        mtta_seconds,
        tta_at_80r_seconds: op.mean_tta_seconds,
        threshold_at_80r: op.threshold,
        recall_at_80r: op.recall,
        reached_80r: op.reached,
        n_videos: videos.len(),
        n_positive,
        curve: mtta_ap_curve(videos, &opts.thresholds)?,
    })
}
