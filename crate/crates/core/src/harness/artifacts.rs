use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::feature_io::SequenceRecord;
use crate::metrics::{curve_csv, evaluate, EvalOptions, EvalReport, VideoPrediction};
use crate::model::{forward, MsfinConfig, MsfinParams, RiskSeries};
use crate::tensor::Tensor;

/// Warning threshold marked in per-frame outputs.
pub const WARNING_TAU: f64 = 0.5;

/// Model probabilities for each record.
pub fn video_predictions(
    params: &MsfinParams<Tensor<f32>>,
    cfg: &MsfinConfig,
    records: &[SequenceRecord],
) -> Result<Vec<VideoPrediction>> {
    records
        .iter()
        .map(|r| {
            let s = forward(r, params, cfg)?;
            Ok(VideoPrediction {
                probs: s.probs.iter().map(|&p| p as f64).collect(),
                label: r.label,
                t_ao: r.t_ao,
                fps: r.fps,
            })
        })
        .collect()
}

/// `video,frame,z,warning`: one row per frame of every video, frames
/// 1-based, `warning` set where `z ≥ 0.5`.
pub fn probability_curves_csv(ids: &[String], videos: &[VideoPrediction]) -> String {
    let mut s = String::from("video,frame,z,warning\n");
    for (id, v) in ids.iter().zip(videos) {
        for (t, &p) in v.probs.iter().enumerate() {
            let _ = writeln!(s, "{id},{},{p},{}", t + 1, (p >= WARNING_TAU) as u8);
        }
    }
    s
}

/// Writes `report.json`, `curve.csv` (threshold sweep) and
/// `probabilities.csv`, returning the report.
pub fn eval_to_dir(ids: &[String], videos: &[VideoPrediction], opts: &EvalOptions, dir: &Path) -> Result<EvalReport> {
    if ids.len() != videos.len() {
        return Err(Error::Contract(format!(
            "{} ids for {} videos",
            ids.len(),
            videos.len()
        )));
    }
    let report = evaluate(videos, opts)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(dir.join("curve.csv"), curve_csv(&report.curve))?;
    std::fs::write(dir.join("probabilities.csv"), probability_curves_csv(ids, videos))?;
    Ok(report)
}

/// `frame,z,warning` for one series.
pub fn probs_csv(probs: &[f64]) -> String {
    let mut s = String::from("frame,z,warning\n");
    for (t, &p) in probs.iter().enumerate() {
        let _ = writeln!(s, "{},{p},{}", t + 1, (p >= WARNING_TAU) as u8);
    }
    s
}

/// Head-averaged `[heads, T, N]` weights as `frame,obj_0,…,obj_{N−1}`.
pub fn attention_csv(weights: &Tensor<f32>) -> Result<String> {
    let [h, t, n] = match weights.shape() {
        &[h, t, n] => [h, t, n],
        other => return Err(Error::dim("attention_csv", other, &[0, 0, 0])),
    };
    let mut s = String::from("frame");
    for j in 0..n {
        let _ = write!(s, ",obj_{j}");
    }
    s.push('\n');
    let w = weights.data();
    for ti in 0..t {
        let _ = write!(s, "{}", ti + 1);
        for j in 0..n {
            let mean = (0..h).map(|k| w[(k * t + ti) * n + j] as f64).sum::<f64>() / h as f64;
            let _ = write!(s, ",{mean}");
        }
        s.push('\n');
    }
    Ok(s)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Probability-over-time plot: one `<polyline>` per curve, a dashed line at
/// `z = 0.5`, and a vertical marker at `t_ao` when given.
pub fn risk_svg(title: &str, curves: &[(&str, &[f64])], t_ao: Option<u32>) -> String {
    const W: f64 = 640.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 4] = ["#c0392b", "#2471a3", "#1e8449", "#7d3c98"];
    let steps = curves.iter().map(|c| c.1.len()).max().unwrap_or(1).max(2);
    let x = |t: f64| PAD + (W - 2.0 * PAD) * t / (steps - 1) as f64;
    let y = |p: f64| H - PAD - (H - 2.0 * PAD) * p.clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, xml_escape(title));
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="gray"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{y5}" x2="{}" y2="{y5}" stroke="dimgray" stroke-dasharray="6 4"/>"#,
        W - PAD,
        y5 = y(WARNING_TAU)
    );
    if let Some(t) = t_ao {
        let xt = x((t as f64 - 1.0).max(0.0));
        let _ = writeln!(
            s,
            r#"<line x1="{xt}" y1="{PAD}" x2="{xt}" y2="{}" stroke="black" stroke-width="1.5"/>"#,
            H - PAD
        );
    }
    for (i, (name, probs)) in curves.iter().enumerate() {
        let pts: Vec<String> = probs
            .iter()
            .enumerate()
            .map(|(t, &p)| format!("{:.2},{:.2}", x(t as f64), y(p)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
            COLORS[i % COLORS.len()],
            pts.join(" "),
            xml_escape(name)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}" font-size="12" font-family="sans-serif">frame (1..{steps}), z = 0.5 dashed</text>"#,
        H - 10.0
    );
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone)]
pub struct InferArtifacts {
    pub series: RiskSeries<f32>,
    pub probs_csv: PathBuf,
    pub attention_csv: Vec<PathBuf>,
    pub svg: PathBuf,
}

/// Writes `<id>_probs.csv`, `<id>_attn_<scale>.csv` per enabled scale and
/// `<id>_risk.svg`.
pub fn infer_to_dir(
    params: &MsfinParams<Tensor<f32>>,
    cfg: &MsfinConfig,
    record: &SequenceRecord,
    dir: &Path,
) -> Result<InferArtifacts> {
    let series = forward(record, params, cfg)?;
    std::fs::create_dir_all(dir)?;
    let stem: String = record
        .id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    let probs: Vec<f64> = series.probs.iter().map(|&p| p as f64).collect();
    let probs_path = dir.join(format!("{stem}_probs.csv"));
    std::fs::write(&probs_path, probs_csv(&probs))?;
    let mut attn_paths = Vec::new();
    for (scale, w) in &series.attn_by_scale {
        let path = dir.join(format!("{stem}_attn_{}.csv", scale.name()));
        std::fs::write(&path, attention_csv(w)?)?;
        attn_paths.push(path);
    }
    let svg_path = dir.join(format!("{stem}_risk.svg"));
    std::fs::write(&svg_path, risk_svg(&record.id, &[("z", &probs)], record.t_ao))?;
    Ok(InferArtifacts {
        series,
        probs_csv: probs_path,
        attention_csv: attn_paths,
        svg: svg_path,
    })
}
