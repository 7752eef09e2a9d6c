//! Overfits a Micro binary change detector on a handful of synthetic pairs
//! and reports the training-set F1 as it goes.
//!
//! ```text
//! cargo run --release --example train_bcd -- [iters] [lr] [augment]
//! ```

use stsmcd::data::{synth, SynthConfig};
use stsmcd::train::{evaluate, fit, TrainConfig, TrainObserver};
use stsmcd::{Model, Result, Task};

struct Progress<'a> {
    samples: &'a [stsmcd::data::Sample],
    every: usize,
}

impl TrainObserver for Progress<'_> {
    fn iteration(&mut self, iter: usize, loss: f64, model: &Model) -> Result<()> {
        if iter % self.every == 0 {
            let (report, _) = evaluate(model, self.samples, None)?;
            println!("iter {iter:5}  loss {loss:.4}  train f1 {:.4}", report.get("bcd.f1").unwrap_or(0.0));
        }
        Ok(())
    }
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let mut cfg = TrainConfig {
        task: Task::Bcd,
        batch: 4,
        ..TrainConfig::default()
    };
    cfg.set("iters", &arg(0, "200"))?;
    cfg.set("lr", &arg(1, "1e-4"))?;
    cfg.set("augment", &arg(2, "true"))?;

    let samples = synth::generate(&SynthConfig::new(Task::Bcd, 8, 64, 2024))?;
    let mut model = Model::new(Task::Bcd, cfg.model_config(), cfg.seed);
    println!(
        "training {} parameters for {} iterations (lr {}, augment {})",
        model.store.num_scalars(),
        cfg.iters,
        cfg.lr,
        cfg.augment
    );
    let mut progress = Progress {
        samples: &samples,
        every: (cfg.iters / 10).max(1),
    };
    fit(&mut model, &samples, &cfg, &mut progress)?;
    let (report, _) = evaluate(&model, &samples, None)?;
    print!("{}", report.to_text());
    Ok(())
}
