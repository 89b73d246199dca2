//! A reduced ablation grid on synthetic data: the full model against runs
//! without the long-term scale and without the post-fusion attention.

use msfin::harness::{ablate, ablation_csv, load_splits, RunConfig};
use msfin::model::{Component, MsfinConfig};

fn main() -> msfin::Result<()> {
    let mut cfg = RunConfig::toy();
    cfg.model = MsfinConfig {
        d_in: 64,
        d: 16,
        n_objects: 6,
        heads: 2,
        layers_sam: 1,
        layers_cam: 1,
        layers_ctm: 1,
        max_frames: 64,
        ..MsfinConfig::toy()
    };
    cfg.optimizer.lr = 1e-3;
    cfg.epochs = std::env::args().nth(1).map_or(Ok(8), |e| e.parse()).expect("epochs");
    let splits = load_splits(&cfg)?;
    let rows = ablate(&cfg, &[vec![Component::Long], vec![Component::CamPost]], &splits)?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
