//! Causal self-attention over a short sequence, printing the head-averaged
//! weights. Row t only attends to columns 0..=t.

use msfin::attention::{self_attention_block, AttentionBlock, AttentionConfig, AttentionMask};
use msfin::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> msfin::Result<()> {
    let (steps, d) = (5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let block = AttentionBlock::<Tensor<f64>>::init(&mut rng, d);
    let x = Tensor::new([steps, d], (0..steps * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let mut tape = Tape::new();
    let p = block.map(&mut |t| tape.constant(t.clone()));
    let x = tape.constant(x);
    let cfg = AttentionConfig::new(2);
    let (y, w) = self_attention_block(&mut tape, x, &p, &cfg, &AttentionMask::Causal)?;
    println!("output shape {:?}", tape.shape(y));

    let w = tape.value(w);
    let heads = w.shape()[0];
    for t in 0..steps {
        let row: Vec<String> = (0..steps)
            .map(|s| {
                let mean = (0..heads).map(|h| w.at(&[h, t, s])).sum::<f64>() / heads as f64;
                format!("{mean:.3}")
            })
            .collect();
        println!("t={t}  {}", row.join("  "));
    }
    Ok(())
}
