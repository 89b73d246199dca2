//! Seeded generator of labelled feature sequences with planted risk
//! signatures at three temporal scales.
//!
//! Randomness: every record owns a ChaCha8 stream seeded with
//! `splitmix64(master_seed + index)`; Gaussian noise uses the Box–Muller
//! transform on pairs of its uniforms. The risk signature lives in the
//! first `max(1, d_in/8)` channels (the risk block) of the risk object.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::SequenceRecord;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Step at `t_ao − round(fps/3)`.
    Sudden,
    /// Linear ramp over `[t_ao − 2·fps, t_ao]`.
    Gradual,
    /// One-frame pulse at `t_ao − 3·fps`, then a drift of `0.1·σ`.
    EarlyCue,
    Benign,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::Sudden,
        Archetype::Gradual,
        Archetype::EarlyCue,
        Archetype::Benign,
    ];
    pub const POSITIVE: [Archetype; 3] = [Archetype::Sudden, Archetype::Gradual, Archetype::EarlyCue];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Sudden => "sudden",
            Archetype::Gradual => "gradual",
            Archetype::EarlyCue => "early_cue",
            Archetype::Benign => "benign",
        }
    }

    /// Archetype encoded in a generated record id (`<name>-<index>`).
    pub fn from_id(id: &str) -> Option<Archetype> {
        let name = id.rsplit_once('-')?.0;
        Archetype::ALL.into_iter().find(|a| a.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub archetype: Archetype,
    pub steps: usize,
    pub n_objects: usize,
    pub d_in: usize,
    pub fps: u32,
    /// 1-based accident frame; ignored for benign scenarios.
    pub t_ao: Option<u32>,
    pub risk_object: usize,
    /// Valid object slots (leading); the rest are zero padding.
    pub n_valid: usize,
    pub noise_sigma: f64,
    /// Signature amplitude `A`.
    pub amplitude: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Toy layout: 50 frames at 10 fps, 6 objects of width 64, accident
    /// one second before the end, `σ = 1`, `A = 4σ`.
    pub fn toy(archetype: Archetype) -> Self {
        ScenarioSpec {
            archetype,
            steps: 50,
            n_objects: 6,
            d_in: 64,
            fps: 10,
            t_ao: (archetype != Archetype::Benign).then_some(40),
            risk_object: 0,
            n_valid: 6,
            noise_sigma: 1.0,
            amplitude: 4.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.n_objects == 0 || self.d_in == 0 || self.fps == 0 {
            return fail("scenario dimensions and fps must be positive".into());
        }
        if self.risk_object >= self.n_objects {
            return fail(format!(
                "risk object {} outside {} slots",
                self.risk_object, self.n_objects
            ));
        }
        if self.n_valid <= self.risk_object || self.n_valid > self.n_objects {
            return fail(format!(
                "{} valid slots cannot hold risk object {}",
                self.n_valid, self.risk_object
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.amplitude.is_finite() {
            return fail("noise sigma must be >= 0 and amplitude finite".into());
        }
        match (self.archetype, self.t_ao) {
            (Archetype::Benign, Some(_)) => fail("benign scenario with t_ao".into()),
            (Archetype::Benign, None) => Ok(()),
            (_, None) => fail("risky scenario without t_ao".into()),
            (_, Some(t)) if t < self.fps || t as usize > self.steps => {
                fail(format!("t_ao {t} outside [fps = {}, T = {}]", self.fps, self.steps))
            }
            _ => Ok(()),
        }
    }

    /// Width of the risk channel block.
    pub fn risk_channels(&self) -> usize {
        (self.d_in / 8).max(1)
    }

    /// Noise-free signature at 1-based frame `t`.
    pub fn signature(&self, t: usize) -> f64 {
        let Some(t_ao) = self.t_ao.map(|v| v as i64) else {
            return 0.0;
        };
        let (t, fps, a) = (t as i64, self.fps as i64, self.amplitude);
        match self.archetype {
            Archetype::Benign => 0.0,
            Archetype::Sudden => {
                let onset = t_ao - round_half_up(fps as f64 / 3.0);
                if t >= onset {
                    a
                } else {
                    0.0
                }
            }
            Archetype::Gradual => {
                let start = (t_ao - 2 * fps).max(1);
                if t >= t_ao {
                    a
                } else if t <= start {
                    0.0
                } else {
                    a * (t - start) as f64 / (t_ao - start) as f64
                }
            }
            Archetype::EarlyCue => {
                let cue = (t_ao - 3 * fps).max(1);
                if t == cue {
                    a
                } else if t > cue {
                    0.1 * self.noise_sigma
                } else {
                    0.0
                }
            }
        }
    }
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// SplitMix64 finaliser.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal draws by Box–Muller, caching the second value.
struct Gaussian {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Gaussian {
    fn next(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let th = std::f64::consts::TAU * u2;
        self.spare = Some(r * th.sin());
        r * th.cos()
    }
}

/// One labelled record for `spec`, with id `<archetype>-<seed>`.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<SequenceRecord> {
    generate_with_id(spec, format!("{}-{}", spec.archetype.name(), spec.seed))
}

fn generate_with_id(spec: &ScenarioSpec, id: String) -> Result<SequenceRecord> {
    spec.validate()?;
    let (steps, n, d_in) = (spec.steps, spec.n_objects, spec.d_in);
    let sigma = spec.noise_sigma;
    let block = spec.risk_channels();
    let mut g = Gaussian {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        spare: None,
    };
    let mut objects = vec![0f32; steps * n * d_in];
    let mut frames = vec![0f32; steps * d_in];
    let mut mask = vec![false; steps * n];
    for t in 0..steps {
        let sig = spec.signature(t + 1);
        let mut scene = vec![0f64; d_in];
        for j in 0..spec.n_valid {
            mask[t * n + j] = true;
            let row = &mut objects[(t * n + j) * d_in..(t * n + j + 1) * d_in];
            for (c, v) in row.iter_mut().enumerate() {
                let mut x = sigma * g.next();
                if j == spec.risk_object && c < block {
                    x += sig;
                }
                *v = x as f32;
                scene[c] += x;
            }
        }
        for c in 0..d_in {
            frames[t * d_in + c] = (scene[c] / spec.n_valid as f64 + sigma * g.next()) as f32;
        }
    }
    let positive = spec.archetype != Archetype::Benign;
    Ok(SequenceRecord {
        id,
        frames: Tensor::new([steps, d_in], frames)?,
        objects: Tensor::new([steps, n, d_in], objects)?,
        mask,
        label: positive as u8,
        t_ao: if positive { spec.t_ao } else { None },
        fps: spec.fps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub spec: ScenarioSpec,
}

/// Per-record specs; enough to regenerate every record bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub master_seed: u64,
    pub n_per_archetype: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub records: Vec<SequenceRecord>,
    pub manifest: GenerationManifest,
}

impl GeneratedDataset {
    pub fn archetype(&self, i: usize) -> Archetype {
        self.manifest.entries[i].spec.archetype
    }
}

/// `n` records of each risky archetype and `3n` benign ones, interleaved
/// as sudden, gradual, early cue, benign × 3.
///
/// Record `i` is seeded with `splitmix64(seed + i)`; its risk object is
/// uniform over the slots and the valid slot count uniform in
/// `[risk + 1, N]`, both drawn from that record's stream. `base` supplies
/// the shapes, rates, `t_ao`, noise and amplitude.
pub fn generate_dataset(n_per_archetype: usize, base: &ScenarioSpec, seed: u64) -> Result<GeneratedDataset> {
    if n_per_archetype == 0 {
        return Err(Error::Config("need at least one record per archetype".into()));
    }
    let t_ao = match base.t_ao {
        Some(t) => t,
        None => return Err(Error::Config("base spec needs t_ao for the risky archetypes".into())),
    };
    let order = [
        Archetype::Sudden,
        Archetype::Gradual,
        Archetype::EarlyCue,
        Archetype::Benign,
        Archetype::Benign,
        Archetype::Benign,
    ];
    let mut entries = Vec::with_capacity(6 * n_per_archetype);
    for _ in 0..n_per_archetype {
        for archetype in order {
            let index = entries.len() as u64;
            let record_seed = splitmix64(seed.wrapping_add(index));
            let mut pick = ChaCha8Rng::seed_from_u64(record_seed ^ 0x5EED_0B1E_C7u64);
            let risk_object = pick.gen_range(0..base.n_objects);
            let n_valid = pick.gen_range(risk_object + 1..=base.n_objects);
            let spec = ScenarioSpec {
                archetype,
                t_ao: (archetype != Archetype::Benign).then_some(t_ao),
                risk_object,
                n_valid,
                seed: record_seed,
                ..base.clone()
            };
            entries.push(ManifestEntry {
                id: format!("{}-{:05}", archetype.name(), index),
                spec,
            });
        }
    }
    let manifest = GenerationManifest {
        master_seed: seed,
        n_per_archetype,
        entries,
    };
    let records = regenerate(&manifest)?;
    Ok(GeneratedDataset { records, manifest })
}

/// Rebuilds the records described by a manifest.
pub fn regenerate(manifest: &GenerationManifest) -> Result<Vec<SequenceRecord>> {
    manifest
        .entries
        .iter()
        .map(|e| generate_with_id(&e.spec, e.id.clone()))
        .collect()
}

/// Seeded shuffle of `0..n` split into `(train, test)` with
/// `round(n · test_fraction)` test items.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * test_fraction).round() as usize).min(n);
    let test = idx.split_off(n - n_test);
    (idx, test)
}

/// Hand-written detector: per frame, the highest risk-block mean over the
/// valid objects, as a running maximum scaled by `1/amplitude` and clipped
/// to `[0, 1]`.
pub fn matched_filter(record: &SequenceRecord, amplitude: f64) -> Vec<f64> {
    let (steps, n, d_in) = (record.steps(), record.n_objects(), record.d_in());
    let block = (d_in / 8).max(1);
    let mut best = f64::NEG_INFINITY;
    (0..steps)
        .map(|t| {
            for j in 0..n {
                if record.mask[t * n + j] {
                    let row = &record.objects.data()[(t * n + j) * d_in..(t * n + j) * d_in + block];
                    let m = row.iter().map(|&v| v as f64).sum::<f64>() / block as f64;
                    best = best.max(m);
                }
            }
            (best / amplitude).clamp(0.0, 1.0)
        })
        .collect()
}
