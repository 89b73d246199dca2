//! Exponential and focal-exponential losses of a few probability curves for
//! a positive video (accident at frame 40, 10 fps) and a negative one.

use msfin::loss::{decay_weight, exponential_loss, focal_exponential_loss, SequenceTarget};

fn main() -> msfin::Result<()> {
    let (steps, t_ao, fps) = (50, 40u32, 10.0);
    println!(
        "decay weight at t_ao−20, t_ao−10, t_ao: {:.3} {:.3} {:.3}",
        decay_weight(20, 40, fps),
        decay_weight(30, 40, fps),
        decay_weight(40, 40, fps)
    );

    let curves: [(&str, Vec<f64>); 3] = [
        ("flat 0.5", vec![0.5; steps]),
        (
            "early rise",
            (0..steps).map(|t| if t >= 10 { 0.9 } else { 0.1 }).collect(),
        ),
        (
            "late rise",
            (0..steps).map(|t| if t >= 36 { 0.9 } else { 0.1 }).collect(),
        ),
    ];
    for (target_name, target) in [
        ("positive", SequenceTarget::positive(t_ao)),
        ("negative", SequenceTarget::negative()),
    ] {
        for (name, probs) in &curves {
            let e = exponential_loss(probs, &target, fps)?;
            let f = focal_exponential_loss(probs, &target, fps, 0.25, 2.0)?;
            println!("{target_name:>8} {name:>10}: exponential {e:8.3}  focal {f:8.3}");
        }
    }
    Ok(())
}
