use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msfin::feature_io::{read_dataset, DatasetReader, SequenceRecord};
use msfin::harness::{
    ablate, ablation_csv, eval_to_dir, infer_to_dir, load_splits, train_with, video_predictions, RunConfig,
};
use msfin::metrics::EvalOptions;
use msfin::model::{read_checkpoint, Component};
use msfin::{Error, Result};

#[derive(Parser)]
#[command(
    name = "msfin",
    version,
    about = "Accident anticipation with multi-scale feature interaction"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes checkpoints, the training log and the effective config.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on an MSFD dataset.
    Eval {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the baseline and one model per switch set, then tabulate.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        /// Comma-separated; `+` disables several components in one run
        /// (e.g. `S,M,L,sam,cam_pre,cam_post` or `S+M`).
        #[arg(long, default_value = "S,M,L,sam,cam_pre,cam_post")]
        switches: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump probabilities, post-fusion attention and a plot for one record.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        record: String,
        #[arg(long, default_value = "infer_out")]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path)?.with_env_seed()
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("effective_config.json"), cfg.to_pretty_json())?;
    eprintln!("config hash {}", cfg.hash());
    Ok(())
}

fn parse_switches(s: &str) -> Result<Vec<Vec<Component>>> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|set| set.split('+').map(str::parse).collect())
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            echo_config(&cfg, &cfg.output_dir)?;
            let splits = load_splits(&cfg)?;
            eprintln!("train {} / test {} sequences", splits.train.len(), splits.test.len());
            let outcome = train_with(&cfg, &splits, Some(&cfg.output_dir), |e| {
                eprintln!(
                    "epoch {:>3}  loss {:.5}  ap {}  mtta {}  {:.1}s",
                    e.epoch,
                    e.train_loss,
                    e.val_ap.map_or("-".into(), |v| format!("{v:.4}")),
                    e.val_mtta.map_or("-".into(), |v| format!("{v:.3}s")),
                    e.wall_seconds
                );
            })?;
            println!("{}", serde_json::to_string_pretty(&outcome.log)?);
        }
        Cmd::Eval {
            config,
            ckpt,
            data,
            out,
        } => {
            let (model, params) = read_checkpoint::<f32>(&ckpt)?;
            let out = match (out, config) {
                (Some(o), _) => o,
                (None, Some(c)) => {
                    let cfg = load_config(&c)?;
                    if cfg.model != model {
                        eprintln!(
                            "warning: checkpoint model config differs from {}; using the checkpoint's",
                            c.display()
                        );
                    }
                    cfg.output_dir.join("eval")
                }
                (None, None) => PathBuf::from("eval_out"),
            };
            let records: Vec<SequenceRecord> = read_dataset(&data)?.collect::<Result<_>>()?;
            for r in &records {
                msfin::harness::check_shape(r, &model)?;
            }
            let videos = video_predictions(&params, &model, &records)?;
            let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
            let report = eval_to_dir(&ids, &videos, &EvalOptions::default(), &out)?;
            for (id, v) in ids.iter().zip(&videos) {
                if let Some(t) = v.probs.iter().position(|&p| p >= 0.5) {
                    eprintln!("warning: {id} crosses 0.5 at frame {}", t + 1);
                }
            }
            let mut summary = serde_json::to_value(&report)?;
            summary.as_object_mut().map(|o| o.remove("curve"));
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Cmd::Ablate { config, switches, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let sets = parse_switches(&switches)?;
            echo_config(&cfg, &cfg.output_dir)?;
            let splits = load_splits(&cfg)?;
            let rows = ablate(&cfg, &sets, &splits)?;
            let csv = ablation_csv(&rows);
            std::fs::write(cfg.output_dir.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::Infer {
            ckpt,
            data,
            record,
            out,
        } => {
            let (model, params) = read_checkpoint::<f32>(&ckpt)?;
            let mut reader = DatasetReader::open(&data)?;
            let i = reader
                .find(&record)
                .ok_or_else(|| Error::data(&record, format!("not found in {}", data.display())))?;
            let rec = reader.read_record(i)?;
            msfin::harness::check_shape(&rec, &model)?;
            let art = infer_to_dir(&params, &model, &rec, &out)?;
            let max = art.series.probs.iter().copied().fold(0.0f32, f32::max);
            eprintln!("max z = {max:.4}");
            for p in std::iter::once(&art.probs_csv)
                .chain(&art.attention_csv)
                .chain([&art.svg])
            {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
