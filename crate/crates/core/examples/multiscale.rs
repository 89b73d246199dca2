//! Short, mid and long temporal pooling of one channel. The windows follow
//! the frame rate: max over round(fps/3) frames, mean over fps frames, and a
//! running max over the whole prefix.

use msfin::multiscale::{pool_scale, MultiScaleConfig, Scale};
use msfin::tensor::{Tape, Tensor};

fn main() -> msfin::Result<()> {
    let fps = 6;
    let cfg = MultiScaleConfig::from_fps(fps, 1)?;
    println!(
        "fps {fps}: short window {}, mid window {}",
        cfg.short_window, cfg.mid_window
    );

    let signal = [0.0, 0.2, 3.0, 0.1, 0.0, 0.4, 0.3, 0.0, 0.1, 0.2, 0.0, 0.1];
    let mut tape = Tape::<f64>::new();
    let f = tape.constant(Tensor::from_f64([signal.len(), 1], &signal)?);
    println!("{:>6} {:>6} {:>6} {:>6}", "input", "short", "mid", "long");
    let pooled: Vec<Vec<f64>> = Scale::ALL
        .iter()
        .map(|&s| pool_scale(&mut tape, f, s, &cfg).map(|v| tape.value(v).data().to_vec()))
        .collect::<msfin::Result<_>>()?;
    for (t, x) in signal.iter().enumerate() {
        println!(
            "{x:>6.2} {:>6.2} {:>6.2} {:>6.2}",
            pooled[0][t], pooled[1][t], pooled[2][t]
        );
    }
    Ok(())
}
