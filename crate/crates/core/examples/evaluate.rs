//! Scores the matched-filter detector on synthetic videos at several noise
//! levels and writes the noisiest report to `eval_example/`.

use msfin::harness::eval_to_dir;
use msfin::metrics::{EvalOptions, VideoPrediction};
use msfin::synthetic::{generate_dataset, matched_filter, Archetype, ScenarioSpec};

fn main() -> msfin::Result<()> {
    let mut last = None;
    for sigma in [0.0, 0.5, 1.0, 2.0] {
        let base = ScenarioSpec {
            noise_sigma: sigma,
            ..ScenarioSpec::toy(Archetype::Sudden)
        };
        let ds = generate_dataset(10, &base, 3)?;
        let videos: Vec<VideoPrediction> = ds
            .records
            .iter()
            .map(|r| VideoPrediction {
                probs: matched_filter(r, base.amplitude),
                label: r.label,
                t_ao: r.t_ao,
                fps: r.fps,
            })
            .collect();
        let ids: Vec<String> = ds.records.iter().map(|r| r.id.clone()).collect();
        let r = msfin::metrics::evaluate(&videos, &EvalOptions::default())?;
        println!(
            "sigma {sigma:.1}: AP {:.4}  mTTA {:.2}s  AP@80R {:.4}  TTA@80R {}",
            r.ap,
            r.mtta_seconds,
            r.ap_at_80r,
            r.tta_at_80r_seconds.map_or("-".into(), |v| format!("{v:.2}s"))
        );
        last = Some((ids, videos));
    }
    let (ids, videos) = last.unwrap();
    eval_to_dir(&ids, &videos, &EvalOptions::default(), "eval_example".as_ref())?;
    println!("wrote eval_example/report.json, curve.csv, probabilities.csv");
    Ok(())
}
