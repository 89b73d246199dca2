use std::fs;
use std::process::Command;

use msfin::feature_io::write_dataset;
use msfin::harness::{
    ablate, attention_csv, eval_to_dir, infer_to_dir, load_splits, probs_csv, risk_svg, train, AdamW, OptimizerConfig,
    RunConfig, Splits, SyntheticData,
};
use msfin::metrics::{EvalOptions, VideoPrediction};
use msfin::model::{read_checkpoint, Component, MsfinConfig};
use msfin::synthetic::{generate_dataset, matched_filter, Archetype, ScenarioSpec};
use msfin::tensor::Tensor;
use msfin::Error;
use tempfile::tempdir;

fn tiny() -> RunConfig {
    RunConfig {
        model: MsfinConfig {
            d_in: 16,
            d: 8,
            n_objects: 3,
            heads: 2,
            layers_sam: 1,
            layers_cam: 1,
            layers_ctm: 1,
            fps: 5,
            max_frames: 32,
            ..MsfinConfig::default()
        },
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..Default::default()
        },
        batch_size: 4,
        epochs: 2,
        data: msfin::harness::DataConfig {
            synthetic: Some(SyntheticData {
                n_per_archetype: 2,
                steps: 20,
                t_ao: 16,
                ..Default::default()
            }),
            test_fraction: 0.25,
            ..Default::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn adamw_follows_its_update_rule() {
    // f(θ) = ½(θ − 3)², five steps from θ = 0.
    let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.01);
    let mut opt = AdamW::new(OptimizerConfig {
        lr,
        weight_decay: wd,
        betas: [b1, b2],
        eps,
        ..Default::default()
    })
    .unwrap();
    let mut p = Tensor::<f64>::scalar(0.0);
    let (mut theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for k in 1..=5 {
        let g = theta - 3.0;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(k));
        let vh = v / (1.0 - b2.powi(k));
        theta -= lr * (mh / (vh.sqrt() + eps) + wd * theta);

        let grad = Tensor::scalar(p.item() - 3.0);
        opt.step(&mut [&mut p], &[grad]).unwrap();
        assert!((p.item() - theta).abs() < 1e-12, "step {k}: {} vs {theta}", p.item());
    }
    // The first Adam step moves by lr·sign(g) (plus decay at θ = 0).
    let mut opt = AdamW::new(OptimizerConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..Default::default()
    })
    .unwrap();
    let mut p = Tensor::<f64>::scalar(0.0);
    opt.step(&mut [&mut p], &[Tensor::scalar(-3.0)]).unwrap();
    assert!((p.item() - 0.1).abs() < 1e-9);
}

#[test]
fn config_json_round_trip_and_errors() {
    let cfg = tiny();
    let back = RunConfig::from_json(&cfg.to_pretty_json()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(other.hash(), cfg.hash());

    let e = RunConfig::from_json(r#"{"epochs": 3, "learning_rate": 0.1}"#).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    assert_eq!(e.exit_code(), 2);
    let mut bad = cfg.clone();
    bad.model.disable = [Component::Short, Component::Mid, Component::Long].into();
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = cfg;
    bad.optimizer.name = "sgd".into();
    assert!(bad.validate().is_err());
}

#[test]
fn training_is_deterministic_and_logged() {
    let cfg = tiny();
    let splits = load_splits(&cfg).unwrap();
    assert_eq!((splits.train.len(), splits.test.len()), (9, 3));
    let dir = tempdir().unwrap();
    let a = train(&cfg, &splits, Some(dir.path())).unwrap();
    let b = train(&cfg, &splits, None).unwrap();
    assert_eq!(a.log.losses(), b.log.losses());
    assert_eq!(a.params, b.params);
    assert_eq!(a.log.config_hash, cfg.hash());
    assert!(a.log.epochs.windows(2).all(|w| w[0].epoch < w[1].epoch));

    for name in [
        "effective_config.json",
        "final.msfn",
        "training_log.json",
        "checkpoints/epoch_001.msfn",
        "checkpoints/epoch_002.msfn",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let echoed = RunConfig::load(dir.path().join("effective_config.json")).unwrap();
    assert_eq!(echoed.hash(), cfg.hash());
    let (model, params) = read_checkpoint::<f32>(dir.path().join("final.msfn")).unwrap();
    assert_eq!(model, cfg.model);
    assert_eq!(params, a.params);
    if a.log.best_epoch.is_some() {
        assert!(dir.path().join("best.msfn").exists());
    }

    let mut other = cfg.clone();
    other.seed = 9;
    assert_ne!(train(&other, &splits, None).unwrap().log.losses(), a.log.losses());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = tiny();
    cfg.optimizer.lr = 0.0;
    cfg.epochs = 1;
    let splits = load_splits(&cfg).unwrap();
    let out = train(&cfg, &splits, None).unwrap();
    let init = msfin::model::MsfinParams::<Tensor<f32>>::init(
        &cfg.model,
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed),
    )
    .unwrap();
    assert_eq!(out.params, init);
}

#[test]
fn non_finite_inputs_are_data_errors() {
    let cfg = tiny();
    let mut splits = load_splits(&cfg).unwrap();
    splits.train[0].frames.data_mut()[0] = f32::NAN;
    let e = train(&cfg, &splits, None).unwrap_err();
    assert!(matches!(e, Error::Data { .. }), "{e:?}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn divergence_aborts_with_diagnostics() {
    let mut cfg = tiny();
    cfg.optimizer.lr = 1e30;
    let splits = load_splits(&cfg).unwrap();
    match train(&cfg, &splits, None) {
        Err(e @ Error::Numerical { .. }) => assert_eq!(e.exit_code(), 4),
        other => panic!("{:?}", other.map(|o| o.log)),
    }
}

#[test]
fn mismatched_data_is_a_data_error() {
    let cfg = tiny();
    let mut wide = cfg.clone();
    wide.model.d_in = 32;
    let splits = load_splits(&wide).unwrap();
    let e = train(&cfg, &splits, None).unwrap_err();
    assert!(matches!(e, Error::Data { .. }));
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn explicit_and_tagged_splits() {
    let dir = tempdir().unwrap();
    let cfg = tiny();
    let syn = cfg.data.synthetic.clone().unwrap();
    let a = generate_dataset(2, &syn.base_spec(&cfg.model), 1).unwrap();
    let b = generate_dataset(1, &syn.base_spec(&cfg.model), 2).unwrap();
    write_dataset(dir.path().join("a.msfd"), &a.records).unwrap();
    write_dataset(dir.path().join("b.msfd"), &b.records).unwrap();
    let mut c = cfg.clone();
    c.data.synthetic = None;
    c.data.train = Some(dir.path().join("a.msfd"));
    c.data.test = Some(dir.path().join("b.msfd"));
    let s = load_splits(&c).unwrap();
    assert_eq!((s.train, s.test), (a.records.clone(), b.records));
    c.data.test = None;
    let s = load_splits(&c).unwrap();
    assert_eq!(s.train.len() + s.test.len(), 12);
    assert_eq!(s.test.len(), 3);
}

#[test]
fn matched_filter_eval_artifacts() {
    let dir = tempdir().unwrap();
    let mut base = ScenarioSpec::toy(Archetype::Sudden);
    base.noise_sigma = 0.0;
    let ds = generate_dataset(3, &base, 11).unwrap();
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
    let report = eval_to_dir(&ids, &videos, &EvalOptions::default(), dir.path()).unwrap();
    assert_eq!(report.ap, 1.0);

    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    for key in [
        "ap",
        "ap_at_80r",
        "mtta_seconds",
        "tta_at_80r_seconds",
        "n_videos",
        "n_positive",
        "curve",
    ] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert!(json["ap"].is_number() && json["curve"].is_array());
    assert_eq!(json["curve"].as_array().unwrap().len(), 99);

    let probs = fs::read_to_string(dir.path().join("probabilities.csv")).unwrap();
    let total: usize = ds.records.iter().map(|r| r.steps()).sum();
    assert_eq!(probs.lines().count(), total + 1);
    assert_eq!(probs.lines().next().unwrap(), "video,frame,z,warning");
    let curve = fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 100);
}

#[test]
fn ablation_rows_and_rejection() {
    let mut cfg = tiny();
    cfg.epochs = 1;
    let splits = load_splits(&cfg).unwrap();
    let sets = vec![vec![Component::Short], vec![Component::Mid], vec![Component::Long]];
    let rows = ablate(&cfg, &sets, &splits).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].experiment, "full");
    assert_eq!(rows[3].experiment, "w/o long");
    let csv = msfin::harness::ablation_csv(&rows);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("experiment,ap,mtta_s"));

    let all = vec![vec![Component::Short, Component::Mid, Component::Long]];
    assert!(matches!(ablate(&cfg, &all, &splits), Err(Error::Config(_))));
}

#[test]
fn infer_artifacts_are_consistent() {
    let cfg = tiny();
    let splits: Splits = load_splits(&cfg).unwrap();
    let out = train(&cfg, &splits, None).unwrap();
    let dir = tempdir().unwrap();
    let rec = &splits.test[0];
    let art = infer_to_dir(&out.params, &cfg.model, rec, dir.path()).unwrap();
    assert_eq!(art.attention_csv.len(), 3);
    let n = rec.n_objects();
    for path in &art.attention_csv {
        let text = fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "frame,obj_0,obj_1,obj_2");
        for (t, line) in lines.enumerate() {
            let vals: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
            let valid: f64 = (0..n).filter(|&j| rec.mask[t * n + j]).map(|j| vals[j]).sum();
            assert!((valid - 1.0).abs() < 1e-6, "frame {t}: {valid}");
        }
    }
    let probs = fs::read_to_string(&art.probs_csv).unwrap();
    assert_eq!(probs.lines().count(), rec.steps() + 1);
    let svg = fs::read_to_string(&art.svg).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let polylines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
    assert_eq!(polylines, 1);
}

#[test]
fn svg_has_one_polyline_per_curve() {
    let a = [0.1, 0.4, 0.9];
    let b = [0.2, 0.2, 0.3];
    let svg = risk_svg("a & <b>", &[("one", &a), ("two", &b)], Some(2));
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 2);
    assert_eq!(probs_csv(&a).lines().nth(3).unwrap(), "3,0.9,1");
    let w = Tensor::new([2, 1, 2], vec![0.25f32, 0.75, 0.75, 0.25]).unwrap();
    assert_eq!(attention_csv(&w).unwrap(), "frame,obj_0,obj_1\n1,0.5,0.5\n");
}

fn msfin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_msfin"))
}

#[test]
fn binary_exit_codes_and_seed_override() {
    let dir = tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    let mut cfg = tiny();
    cfg.epochs = 1;
    cfg.output_dir = dir.path().join("run");
    fs::write(&cfg_path, cfg.to_pretty_json()).unwrap();

    let st = msfin()
        .args(["train", "-c"])
        .arg(&cfg_path)
        .env("MSFIN_SEED", "42")
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let echoed = RunConfig::load(dir.path().join("run/effective_config.json")).unwrap();
    assert_eq!(echoed.seed, 42);
    let ckpt = dir.path().join("run/final.msfn");
    assert!(ckpt.exists());

    let data = dir.path().join("test.msfd");
    let syn = cfg.data.synthetic.clone().unwrap();
    let ds = generate_dataset(1, &syn.base_spec(&cfg.model), 3).unwrap();
    write_dataset(&data, &ds.records).unwrap();
    let st = msfin()
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("eval"))
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(dir.path().join("eval/report.json").exists());

    let st = msfin()
        .args(["infer", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .args(["--record", &ds.records[0].id, "--out"])
        .arg(dir.path().join("inf"))
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert_eq!(fs::read_dir(dir.path().join("inf")).unwrap().count(), 5);

    // Config error.
    fs::write(dir.path().join("bad.json"), r#"{"epochs": "many"}"#).unwrap();
    let st = msfin()
        .args(["train", "-c"])
        .arg(dir.path().join("bad.json"))
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));
    let st = msfin()
        .args(["train", "-c"])
        .arg(&cfg_path)
        .env("MSFIN_SEED", "x")
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));
    // Data error.
    fs::write(dir.path().join("junk.msfd"), b"not a dataset at all").unwrap();
    let st = msfin()
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(dir.path().join("junk.msfd"))
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(3));
    let st = msfin()
        .args(["infer", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .args(["--record", "missing"])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(3));
    // All scales off.
    let st = msfin()
        .args(["ablate", "-c"])
        .arg(&cfg_path)
        .args(["--switches", "S+M+L"])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));
}
