//! Degradation sweep: score one model on increasingly blurred, noisy or
//! rescaled inputs.
//!
//! ```text
//! cargo run --release --example robustness -- [iters]
//! ```

use stsmcd::data::{synth, Perturbation, SynthConfig};
use stsmcd::train::{evaluate, fit, TrainConfig};
use stsmcd::{Model, Task};

fn main() -> stsmcd::Result<()> {
    let iters = std::env::args().nth(1).unwrap_or_else(|| "30".into());
    let mut cfg = TrainConfig {
        task: Task::Bcd,
        batch: 4,
        ..TrainConfig::default()
    };
    cfg.set("iters", &iters)?;
    let samples = synth::generate(&SynthConfig::new(Task::Bcd, 8, 64, 3))?;
    let mut model = Model::new(Task::Bcd, cfg.model_config(), cfg.seed);
    fit(&mut model, &samples, &cfg, &mut ())?;

    let (clean, _) = evaluate(&model, &samples, None)?;
    println!("{:<12} f1 {:.4}", "clean", clean.get("bcd.f1").unwrap_or(0.0));
    for spec in ["blur:0.5", "blur:1.0", "blur:2.0", "noise:0.05", "noise:0.1", "scale:0.75", "scale:1.25"] {
        let p: Perturbation = spec.parse()?;
        let (r, _) = evaluate(&model, &samples, Some((&p, 7)))?;
        println!("{spec:<12} f1 {:.4}", r.get("bcd.f1").unwrap_or(0.0));
    }
    Ok(())
}
