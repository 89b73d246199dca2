//! Trains the toy configuration on generated data, saving checkpoints and
//! the training log under `runs/toy`. Pass an epoch count to shorten it.

use msfin::harness::{load_splits, train_with, RunConfig};

fn main() -> msfin::Result<()> {
    let mut cfg = RunConfig::toy();
    if let Some(e) = std::env::args().nth(1) {
        cfg.epochs = e.parse().expect("epoch count");
    }
    let splits = load_splits(&cfg)?;
    println!("train {} / validation {} videos", splits.train.len(), splits.test.len());
    let out = train_with(&cfg, &splits, Some(&cfg.output_dir), |e| {
        println!(
            "epoch {:>2}  loss {:.4}  ap {:.3}  mtta {:.2}s  {:.1}s",
            e.epoch,
            e.train_loss,
            e.val_ap.unwrap_or(f64::NAN),
            e.val_mtta.unwrap_or(f64::NAN),
            e.wall_seconds
        );
    })?;
    println!("best epoch {:?} with AP {:?}", out.log.best_epoch, out.log.best_ap);
    Ok(())
}
