//! Checks reverse-mode gradients of a small two-layer network against
//! central differences.

use msfin::tensor::{finite_diff_check, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn net(t: &mut Tape<f64>, v: &[Var]) -> msfin::Result<Var> {
    let (x, w1, b1, w2) = (v[0], v[1], v[2], v[3]);
    let h = t.matmul(x, w1)?;
    let h = t.add(h, b1)?;
    let h = t.gelu(h);
    let y = t.matmul(h, w2)?;
    let p = t.sigmoid(y);
    let l = t.log(p);
    Ok(t.sum(l))
}

fn main() -> msfin::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let params = vec![
        ("x".to_string(), rand(&[4, 3])?),
        ("w1".to_string(), rand(&[3, 8])?),
        ("b1".to_string(), rand(&[8])?),
        ("w2".to_string(), rand(&[8, 1])?),
    ];
    let report = finite_diff_check(&params, net, 1e-5, 1e-6, None)?;
    for (name, err) in &report.per_parameter_errors {
        println!("{name:>3}  max relative error {err:.2e}");
    }
    println!("passed at tolerance {:.0e}: {}", report.tolerance, report.passed);
    Ok(())
}
