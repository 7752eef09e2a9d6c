//! Semantic change detection: train a Micro model briefly on synthetic
//! land-cover pairs and print the SCD metrics and the from-to matrix.
//!
//! ```text
//! cargo run --release --example semantic_change -- [iters] [lr]
//! ```

use stsmcd::data::{synth, SynthConfig};
use stsmcd::models::{transition_matrix, Prediction};
use stsmcd::train::{evaluate, fit, TrainConfig};
use stsmcd::{Model, Task};

fn main() -> stsmcd::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = TrainConfig {
        task: Task::Scd,
        batch: 4,
        iters: 50,
        ..TrainConfig::default()
    };
    if let Some(v) = args.first() {
        cfg.set("iters", v)?;
    }
    if let Some(v) = args.get(1) {
        cfg.set("lr", v)?;
    }
    let samples = synth::generate(&SynthConfig::new(Task::Scd, 8, 64, 5))?;
    let mut model = Model::new(Task::Scd, cfg.model_config(), cfg.seed);
    let losses = fit(&mut model, &samples, &cfg, &mut ())?;
    println!("loss {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);
    let (report, predictions) = evaluate(&model, &samples, None)?;
    print!("{}", report.to_text());
    if let Prediction::Scd { t1, t2, .. } = &predictions[0] {
        println!("predicted from-to counts for sample 0 (row = T1 class, column = T2 class):");
        for row in transition_matrix(t1, t2, model.config.semantic_classes + 1)? {
            println!("  {row:?}");
        }
    }
    Ok(())
}
