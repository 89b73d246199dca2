use msfin::loss::{
    decay_weight, exponential_loss, focal_exponential_loss, loss_on_tape, LossConfig, LossVariant, SequenceTarget,
};
use msfin::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn decay_weight_values() {
    assert_eq!(decay_weight(45, 45, 10.0), 1.0);
    assert!((decay_weight(35, 45, 10.0) - (-1.0f64).exp()).abs() < 1e-12);
    assert!((decay_weight(25, 45, 10.0) - 0.1353352832366127).abs() < 1e-12);
    assert_eq!(decay_weight(60, 45, 10.0), 1.0);
    let w: Vec<f64> = (1..=60).map(|t| decay_weight(t, 45, 20.0)).collect();
    assert!(w.windows(2).all(|p| p[0] <= p[1]));
}

#[test]
fn exponential_loss_values() {
    let neg = exponential_loss(&[0.5; 10], &SequenceTarget::negative(), 20.0).unwrap();
    assert!((neg - 10.0 * 2f64.ln()).abs() < 1e-12);
    assert!((neg - 6.9315).abs() < 1e-4);
    let one = exponential_loss(&[0.5], &SequenceTarget::positive(1), 20.0).unwrap();
    assert!((one - 0.6931).abs() < 1e-4);
    let two = exponential_loss(&[0.5, 0.5], &SequenceTarget::positive(2), 1.0).unwrap();
    let oracle = (-1.0f64).exp() * 2f64.ln() + 2f64.ln();
    assert!((two - oracle).abs() < 1e-12);
    assert!((two - 0.9481).abs() < 1e-4);
}

#[test]
fn focal_loss_values() {
    let v = focal_exponential_loss(&[0.9], &SequenceTarget::positive(1), 20.0, 0.25, 2.0).unwrap();
    let oracle = -0.75 * 0.1f64.powi(2) * 0.9f64.ln();
    assert!((v - oracle).abs() < 1e-15);
    assert!((v - 7.9e-4).abs() < 1e-5);
    // Well-classified negatives vanish.
    let tiny = focal_exponential_loss(&[1e-6; 5], &SequenceTarget::negative(), 20.0, 0.25, 2.0).unwrap();
    assert!(tiny < 1e-17);
}

#[test]
fn focal_reduces_to_half_exponential() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let steps = rng.gen_range(1..40);
        let probs: Vec<f64> = (0..steps).map(|_| rng.gen_range(0.0..1.0)).collect();
        let target = if rng.gen_bool(0.5) {
            SequenceTarget::positive(rng.gen_range(1..=steps as u32))
        } else {
            SequenceTarget::negative()
        };
        let r = rng.gen_range(1..=30) as f64;
        let e = exponential_loss(&probs, &target, r).unwrap();
        let f = focal_exponential_loss(&probs, &target, r, 0.5, 0.0).unwrap();
        assert!((f - 0.5 * e).abs() < 1e-7);
        assert!(e >= 0.0 && e.is_finite());
    }
}

#[test]
fn clamping_keeps_losses_finite() {
    for p in [0.0, 1.0] {
        for target in [SequenceTarget::negative(), SequenceTarget::positive(2)] {
            let e = exponential_loss(&[p, p], &target, 10.0).unwrap();
            let f = focal_exponential_loss(&[p, p], &target, 10.0, 0.25, 2.0).unwrap();
            assert!(e.is_finite() && e >= 0.0);
            assert!(f.is_finite() && f >= 0.0);
        }
    }
}

#[test]
fn inconsistent_targets_and_configs_are_rejected() {
    assert!(exponential_loss(&[0.5; 3], &SequenceTarget::positive(4), 10.0).is_err());
    assert!(exponential_loss(&[0.5; 3], &SequenceTarget { label: 1, t_ao: None }, 10.0).is_err());
    assert!(exponential_loss(&[0.5; 3], &SequenceTarget::negative(), 0.5).is_err());
    let mut c = LossConfig::default();
    c.alpha = 1.0;
    assert!(c.validate().is_err());
    c.alpha = 0.3;
    c.gamma = -1.0;
    assert!(c.validate().is_err());
    assert!(LossConfig::default().validate().is_ok());
}

fn tape_loss(probs: &[f64], target: &SequenceTarget, r: f64, cfg: &LossConfig) -> (f64, Vec<f64>) {
    let mut t = Tape::<f64>::new();
    let p = t.leaf(Tensor::new([probs.len()], probs.to_vec()).unwrap());
    let l = loss_on_tape(&mut t, p, target, r, cfg).unwrap();
    t.backward(l).unwrap();
    (t.value(l).item(), t.grad(p).unwrap().into_data())
}

#[test]
fn tape_losses_agree_with_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let steps = rng.gen_range(1..30);
        let probs: Vec<f64> = (0..steps).map(|_| rng.gen_range(0.01..0.99)).collect();
        let target = if rng.gen_bool(0.5) {
            SequenceTarget::positive(rng.gen_range(1..=steps as u32))
        } else {
            SequenceTarget::negative()
        };
        for cfg in [LossConfig::exponential(), LossConfig::default()] {
            let direct = cfg.loss(&probs, &target, 10.0).unwrap();
            let (taped, grad) = tape_loss(&probs, &target, 10.0, &cfg);
            assert!((direct - taped).abs() < 1e-10 * direct.max(1.0));
            // Central differences on the direct form.
            for i in 0..steps {
                let h = 1e-6;
                let mut up = probs.clone();
                up[i] += h;
                let mut down = probs.clone();
                down[i] -= h;
                let fd = (cfg.loss(&up, &target, 10.0).unwrap() - cfg.loss(&down, &target, 10.0).unwrap()) / (2.0 * h);
                assert!((fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1.0));
            }
        }
    }
}

#[test]
fn gradient_signs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for variant in [LossVariant::Exponential, LossVariant::FocalExponential] {
        let cfg = LossConfig {
            variant,
            ..Default::default()
        };
        for _ in 0..20 {
            let probs: Vec<f64> = (0..8).map(|_| rng.gen_range(0.01..0.99)).collect();
            let (_, g) = tape_loss(&probs, &SequenceTarget::positive(8), 5.0, &cfg);
            assert!(g.iter().all(|&g| g < 0.0), "{g:?}");
            let (_, g) = tape_loss(&probs, &SequenceTarget::negative(), 5.0, &cfg);
            assert!(g.iter().all(|&g| g > 0.0), "{g:?}");
        }
    }
}

#[test]
fn focal_down_weights_well_classified_frames() {
    let focal = LossConfig::default();
    let plain = LossConfig::exponential();
    for p in [0.91, 0.95, 0.99] {
        let (_, gf) = tape_loss(&[p], &SequenceTarget::positive(1), 10.0, &focal);
        let (_, ge) = tape_loss(&[p], &SequenceTarget::positive(1), 10.0, &plain);
        assert!(gf[0].abs() < ge[0].abs());
        let q = 1.0 - p;
        let (_, gf) = tape_loss(&[q], &SequenceTarget::negative(), 10.0, &focal);
        let (_, ge) = tape_loss(&[q], &SequenceTarget::negative(), 10.0, &plain);
        assert!(gf[0].abs() < ge[0].abs());
    }
}
