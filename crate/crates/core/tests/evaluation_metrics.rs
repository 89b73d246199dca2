use msfin::metrics::{
    at_recall, average_precision, curve_csv, default_thresholds, evaluate, frame_level_average_precision, mtta,
    mtta_ap_curve, tta, video_score_at_threshold, EmptyThreshold, EvalOptions, EvalReport, VideoPrediction,
};
use msfin::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn video(probs: Vec<f64>, t_ao: Option<u32>, fps: u32) -> VideoPrediction {
    VideoPrediction {
        probs,
        label: t_ao.is_some() as u8,
        t_ao,
        fps,
    }
}

/// Videos whose whole curve is a constant score.
fn flat(scores: &[f64], labels: &[u8]) -> Vec<VideoPrediction> {
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| video(vec![s; 10], (l == 1).then_some(10), 10))
        .collect()
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, grid: bool) -> Vec<VideoPrediction> {
    let mut out = Vec::new();
    for i in 0..n {
        let steps = rng.gen_range(1..=20);
        let probs = (0..steps)
            .map(|_| {
                if grid {
                    rng.gen_range(0..=1000) as f64 / 1000.0
                } else {
                    rng.gen_range(0.0..1.0)
                }
            })
            .collect();
        let positive = i == 0 || rng.gen_bool(0.5);
        let t_ao = positive.then(|| rng.gen_range(1..=steps as u32));
        out.push(video(probs, t_ao, rng.gen_range(1..=30)));
    }
    out
}

#[test]
fn decision_rule() {
    let v = video(vec![0.1, 0.6, 0.2], None, 10);
    assert!(video_score_at_threshold(&v, 0.5));
    assert!(video_score_at_threshold(&v, 0.0));
    assert!(video_score_at_threshold(&v, 0.6));
    let w = video(vec![0.9, 0.3], None, 10);
    assert!(!video_score_at_threshold(&w, 1.0));
    // Frames after the accident are outside the horizon.
    let p = video(vec![0.1, 0.2, 0.95], Some(2), 10);
    assert!(!video_score_at_threshold(&p, 0.5));
}

#[test]
fn worked_average_precision() {
    let v = flat(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]);
    let ap = average_precision(&v).unwrap();
    assert_eq!(ap, 0.5 * 1.0 + 0.5 * (2.0 / 3.0));
    assert!((ap - 0.8333).abs() < 1e-4);
    assert_eq!(
        average_precision(&flat(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])).unwrap(),
        1.0
    );
    assert_eq!(average_precision(&flat(&[0.1, 0.5, 0.3], &[1, 1, 1])).unwrap(), 1.0);
    assert!(matches!(
        average_precision(&flat(&[0.1, 0.5], &[0, 0])),
        Err(Error::UndefinedMetric(_))
    ));
}

#[test]
fn tta_examples() {
    let mut probs = vec![0.0; 100];
    for p in &mut probs[49..] {
        *p = 1.0;
    }
    let v = video(probs, Some(90), 20);
    assert_eq!(tta(&v, 0.5), Some(2.0));
    let mut at = vec![0.0; 100];
    at[89] = 1.0;
    assert_eq!(tta(&video(at, Some(90), 20), 0.5), Some(0.0));
    assert_eq!(tta(&video(vec![0.1; 100], Some(90), 20), 0.5), None);
    assert_eq!(tta(&video(vec![1.0; 100], None, 20), 0.5), None);
}

#[test]
fn mtta_examples() {
    let ones = vec![video(vec![1.0; 100], Some(90), 20)];
    let m = mtta(&ones, &default_thresholds(), EmptyThreshold::Skip).unwrap();
    assert!((m - 4.45).abs() < 1e-12);
    let mut step = vec![0.0; 100];
    for p in &mut step[49..] {
        *p = 1.0;
    }
    let steps = vec![video(step, Some(90), 20)];
    assert!((mtta(&steps, &default_thresholds(), EmptyThreshold::Skip).unwrap() - 2.0).abs() < 1e-12);
    let none = vec![video(vec![0.0; 10], Some(5), 10)];
    assert!(matches!(
        mtta(&none, &default_thresholds(), EmptyThreshold::Skip),
        Err(Error::UndefinedMetric(_))
    ));
    // Counting empty thresholds as zero halves a half-detected sweep.
    let half = vec![video(vec![0.5; 10], Some(10), 10)];
    let skip = mtta(&half, &[0.25, 0.75], EmptyThreshold::Skip).unwrap();
    let zero = mtta(&half, &[0.25, 0.75], EmptyThreshold::CountAsZero).unwrap();
    assert!((skip - 0.9).abs() < 1e-12);
    assert!((zero - 0.45).abs() < 1e-12);
}

#[test]
fn at_recall_boundary() {
    let sep = flat(&[0.9, 0.8, 0.7, 0.6, 0.5, 0.2, 0.1], &[1, 1, 1, 1, 1, 0, 0]);
    let op = at_recall(&sep, 0.8).unwrap();
    assert_eq!(op.precision, 1.0);
    assert!(op.reached && op.recall >= 0.8);
    // Exactly four of five positives detected at the chosen threshold.
    assert_eq!(op.threshold, 0.6);
    assert_eq!(op.recall, 0.8);
}

// ---------- brute-force oracles ----------

fn oracle_detect(v: &VideoPrediction, tau: f64) -> bool {
    let limit = if v.label == 1 {
        v.t_ao.unwrap() as usize
    } else {
        v.probs.len()
    };
    let mut hit = false;
    for t in 0..limit {
        if v.probs[t] >= tau {
            hit = true;
        }
    }
    hit
}

fn oracle_tta(v: &VideoPrediction, tau: f64) -> Option<f64> {
    let t_ao = v.t_ao? as usize;
    let mut best: Option<usize> = None;
    for t in 1..=t_ao {
        if v.probs[t - 1] >= tau {
            let lead = t_ao - t;
            best = Some(best.map_or(lead, |b| b.max(lead)));
        }
    }
    best.map(|b| b as f64 / v.fps as f64)
}

fn oracle_counts(videos: &[VideoPrediction], tau: f64) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    let mut pos = 0;
    for v in videos {
        if v.label == 1 {
            pos += 1;
        }
        if oracle_detect(v, tau) {
            if v.label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    (tp, fp, pos)
}

/// AP over an explicit descending threshold list.
fn oracle_ap(videos: &[VideoPrediction], taus_desc: &[f64]) -> f64 {
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &tau in taus_desc {
        let (tp, fp, pos) = oracle_counts(videos, tau);
        if tp + fp == 0 {
            continue;
        }
        let r = tp as f64 / pos as f64;
        ap += (r - prev) * tp as f64 / (tp + fp) as f64;
        prev = r;
    }
    ap
}

fn all_frame_values(videos: &[VideoPrediction]) -> Vec<f64> {
    let mut vals = Vec::new();
    for v in videos {
        for &p in &v.probs {
            if !vals.contains(&p) {
                vals.push(p);
            }
        }
    }
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    vals
}

fn oracle_mtta(videos: &[VideoPrediction], taus: &[f64]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for &tau in taus {
        let mut s = 0.0;
        let mut k = 0;
        for v in videos.iter().filter(|v| v.label == 1) {
            if let Some(x) = oracle_tta(v, tau) {
                s += x;
                k += 1;
            }
        }
        if k > 0 {
            sum += s / k as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.gen_range(1..=12);
        let videos = random_set(&mut rng, n, false);
        let ap = average_precision(&videos).unwrap();
        let oracle = oracle_ap(&videos, &all_frame_values(&videos));
        assert!((ap - oracle).abs() < 1e-9, "{ap} vs {oracle}");

        let taus = default_thresholds();
        match (mtta(&videos, &taus, EmptyThreshold::Skip), oracle_mtta(&videos, &taus)) {
            (Ok(a), Some(b)) => assert!((a - b).abs() < 1e-9),
            (Err(Error::UndefinedMetric(_)), None) => {}
            other => panic!("{other:?}"),
        }

        for target in [0.5, 0.8, 1.0] {
            let op = at_recall(&videos, target).unwrap();
            let vals = all_frame_values(&videos);
            let tau = *vals
                .iter()
                .find(|&&tau| {
                    let (tp, _, pos) = oracle_counts(&videos, tau);
                    tp as f64 / pos as f64 >= target
                })
                .unwrap();
            let (tp, fp, _) = oracle_counts(&videos, tau);
            assert_eq!(op.threshold, tau);
            assert!((op.precision - tp as f64 / (tp + fp) as f64).abs() < 1e-9);
            let mut s = 0.0;
            for v in videos.iter().filter(|v| v.label == 1) {
                s += oracle_tta(v, tau).unwrap_or(0.0);
            }
            assert!((op.mean_tta_seconds.unwrap() - s / tp as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn ap_matches_uniform_threshold_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid: Vec<f64> = (0..=10_000).rev().map(|k| k as f64 / 10_000.0).collect();
    for _ in 0..20 {
        let videos = random_set(&mut rng, 15, true);
        let ap = average_precision(&videos).unwrap();
        assert!((ap - oracle_ap(&videos, &grid)).abs() < 1e-6);
    }
}

#[test]
fn curve_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let videos = random_set(&mut rng, 30, false);
    let taus = default_thresholds();
    let curve = mtta_ap_curve(&videos, &taus).unwrap();
    assert_eq!(curve.len(), 99);
    assert!(curve.windows(2).all(|w| w[0].threshold < w[1].threshold));
    assert!(curve.windows(2).all(|w| w[0].recall >= w[1].recall));
    assert!(curve.iter().all(|r| (0.0..=1.0).contains(&r.recall)));
    let low = mtta_ap_curve(&videos, &[0.0]).unwrap();
    assert_eq!(low[0].recall, 1.0);
    let spot = &curve[41];
    let (tp, fp, pos) = oracle_counts(&videos, spot.threshold);
    assert_eq!(spot.recall, tp as f64 / pos as f64);
    if tp + fp > 0 {
        assert_eq!(spot.precision, tp as f64 / (tp + fp) as f64);
    }
    let csv = curve_csv(&curve);
    assert_eq!(csv.lines().count(), 100);
    assert_eq!(csv.lines().next().unwrap(), "threshold,precision,recall,mean_tta_s");
}

#[test]
fn tta_stays_within_bounds_and_ignores_post_accident_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let videos = random_set(&mut rng, 8, false);
        for v in videos.iter().filter(|v| v.label == 1) {
            for &tau in &[0.1, 0.5, 0.9] {
                if let Some(s) = tta(v, tau) {
                    assert!(s >= 0.0 && s <= (v.t_ao.unwrap() - 1) as f64 / v.fps as f64);
                }
            }
        }
        let mut changed = videos.clone();
        for v in changed.iter_mut().filter(|v| v.label == 1) {
            let t = v.t_ao.unwrap() as usize;
            for p in &mut v.probs[t..] {
                *p = rng.gen_range(0.0..1.0);
            }
        }
        let a = evaluate(&videos, &EvalOptions::default()).unwrap();
        let b = evaluate(&changed, &EvalOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn report_serialises_with_documented_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let videos = random_set(&mut rng, 10, false);
    let report = evaluate(&videos, &EvalOptions::default()).unwrap();
    let json = serde_json::to_value(&report).unwrap();
    for key in ["ap", "ap_at_80r", "mtta_seconds", "tta_at_80r_seconds", "curve"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let row = &json["curve"][0];
    for key in ["threshold", "precision", "recall", "mean_tta_seconds"] {
        assert!(row.get(key).is_some(), "{key}");
    }
    let back: EvalReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, report);
    assert!((0.0..=1.0).contains(&report.ap));
}

#[test]
fn frame_level_ap_is_available() {
    let v = vec![video(vec![0.9, 0.8], Some(2), 10), video(vec![0.1, 0.2], None, 10)];
    assert_eq!(frame_level_average_precision(&v).unwrap(), 1.0);
    let w = vec![video(vec![0.9, 0.1], Some(2), 10), video(vec![0.5, 0.5], None, 10)];
    assert!(frame_level_average_precision(&w).unwrap() < average_precision(&w).unwrap());
}
