//! Runs an untrained toy model over one synthetic record and writes the
//! per-frame probabilities, post-fusion attention and a risk plot.

use msfin::harness::infer_to_dir;
use msfin::model::{MsfinConfig, MsfinParams};
use msfin::synthetic::{generate_scenario, Archetype, ScenarioSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> msfin::Result<()> {
    let cfg = MsfinConfig::toy();
    let params = MsfinParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("{} parameters", params.count());
    let rec = generate_scenario(&ScenarioSpec {
        seed: 4,
        ..ScenarioSpec::toy(Archetype::Gradual)
    })?;
    let art = infer_to_dir(&params, &cfg, &rec, "infer_example".as_ref())?;
    let first: Vec<String> = art.series.probs.iter().take(5).map(|p| format!("{p:.3}")).collect();
    println!("first probabilities {}", first.join(" "));
    for p in std::iter::once(&art.probs_csv)
        .chain(&art.attention_csv)
        .chain([&art.svg])
    {
        println!("wrote {}", p.display());
    }
    Ok(())
}
