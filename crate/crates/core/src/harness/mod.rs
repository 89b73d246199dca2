//! Training, evaluation, ablation and inference entry points shared by
//! the `msfin` binary and the examples.

mod artifacts;
mod optim;
mod train;

pub use artifacts::{
    attention_csv, eval_to_dir, infer_to_dir, probability_curves_csv, probs_csv, risk_svg, video_predictions,
    InferArtifacts,
};
pub use optim::{AdamW, OptimizerConfig};
pub use train::{
    ablate, ablation_csv, batch_gradients, train, train_with, AblationRow, EpochLog, TrainOutcome, TrainingLog,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature_io::{read_dataset, DatasetReader, SequenceRecord, Split};
use crate::loss::LossConfig;
use crate::model::MsfinConfig;
use crate::synthetic::{generate_dataset, split_indices, Archetype, ScenarioSpec};

/// Environment variable overriding [`RunConfig::seed`].
pub const SEED_ENV: &str = "MSFIN_SEED";

/// Generated training pool used when no dataset file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub n_per_archetype: usize,
    pub steps: usize,
    pub t_ao: u32,
    pub noise_sigma: f64,
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            n_per_archetype: 20,
            steps: 50,
            t_ao: 40,
            noise_sigma: 1.0,
            amplitude: 4.0,
            seed: 0,
        }
    }
}

impl SyntheticData {
    /// Base scenario for a model configuration.
    pub fn base_spec(&self, model: &MsfinConfig) -> ScenarioSpec {
        ScenarioSpec {
            steps: self.steps,
            n_objects: model.n_objects,
            d_in: model.d_in,
            fps: model.fps,
            t_ao: Some(self.t_ao),
            noise_sigma: self.noise_sigma,
            amplitude: self.amplitude,
            ..ScenarioSpec::toy(Archetype::Sudden)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// MSFD file with the training pool (or both splits when tagged).
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
    /// Held-out share when no explicit test set exists.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            test: None,
            synthetic: None,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: MsfinConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    /// Write a checkpoint after every epoch (the best-AP one is always kept).
    pub checkpoint_every_epoch: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: MsfinConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 10,
            epochs: 60,
            seed: 0,
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every_epoch: true,
        }
    }
}

impl RunConfig {
    /// Toy synthetic run: 120 videos of 50 frames, `d = 32`, 30 epochs.
    pub fn toy() -> Self {
        RunConfig {
            model: MsfinConfig::toy(),
            optimizer: OptimizerConfig {
                lr: 1e-4,
                ..Default::default()
            },
            epochs: 30,
            data: DataConfig {
                synthetic: Some(SyntheticData::default()),
                ..Default::default()
            },
            output_dir: PathBuf::from("runs/toy"),
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        if self.data.train.is_none() && self.data.synthetic.is_none() {
            return Err(Error::Config(
                "no training data: set data.train or data.synthetic".into(),
            ));
        }
        Ok(())
    }

    /// Applies `MSFIN_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Training and test records for a run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<SequenceRecord>,
    pub test: Vec<SequenceRecord>,
}

/// Resolves the data section: an explicit test file wins, then split tags
/// in the training file, then a seeded split of the pool.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let data = &cfg.data;
    let pool: Vec<(SequenceRecord, Option<Split>)> = match (&data.train, &data.synthetic) {
        (Some(path), _) => DatasetReader::open(path)?.read_all()?,
        (None, Some(syn)) => generate_dataset(syn.n_per_archetype, &syn.base_spec(&cfg.model), syn.seed)?
            .records
            .into_iter()
            .map(|r| (r, None))
            .collect(),
        (None, None) => return Err(Error::Config("no training data".into())),
    };
    for (r, _) in &pool {
        check_shape(r, &cfg.model)?;
    }
    if let Some(test) = &data.test {
        let test: Vec<SequenceRecord> = read_dataset(test)?.collect::<Result<_>>()?;
        for r in &test {
            check_shape(r, &cfg.model)?;
        }
        return Ok(Splits {
            train: pool.into_iter().map(|p| p.0).collect(),
            test,
        });
    }
    if pool.iter().any(|p| p.1.is_some()) {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (r, s) in pool {
            match s {
                Some(Split::Test) => test.push(r),
                _ => train.push(r),
            }
        }
        return Ok(Splits { train, test });
    }
    let seed = data.synthetic.as_ref().map_or(cfg.seed, |s| s.seed);
    let (tr, te) = split_indices(pool.len(), data.test_fraction, seed);
    let mut slots: Vec<Option<SequenceRecord>> = pool.into_iter().map(|p| Some(p.0)).collect();
    let mut take = |idx: Vec<usize>| idx.into_iter().map(|i| slots[i].take().unwrap()).collect::<Vec<_>>();
    let train = take(tr);
    let test = take(te);
    Ok(Splits { train, test })
}

/// Dataset/model compatibility.
pub fn check_shape(r: &SequenceRecord, model: &MsfinConfig) -> Result<()> {
    if r.d_in() != model.d_in || r.n_objects() != model.n_objects {
        return Err(Error::data(
            &r.id,
            format!(
                "record has {} objects of width {}, model expects {} of width {}",
                r.n_objects(),
                r.d_in(),
                model.n_objects,
                model.d_in
            ),
        ));
    }
    if r.steps() > model.max_frames {
        return Err(Error::data(
            &r.id,
            format!("{} frames exceed max_frames {}", r.steps(), model.max_frames),
        ));
    }
    Ok(())
}
