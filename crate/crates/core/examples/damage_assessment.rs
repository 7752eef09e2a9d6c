//! Building damage assessment: localization on the pre-event image,
//! per-level damage classification from both images.
//!
//! ```text
//! cargo run --release --example damage_assessment -- [iters] [lr]
//! ```

use stsmcd::data::{synth, Labels, SynthConfig};
use stsmcd::train::{evaluate, fit, TrainConfig};
use stsmcd::{Model, Task};

fn main() -> stsmcd::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = TrainConfig {
        task: Task::Bda,
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
    let samples = synth::generate(&SynthConfig::new(Task::Bda, 8, 64, 9))?;
    if let Labels::Bda { loc, clf } = &samples[0].labels {
        let levels: Vec<usize> = (1..=4).map(|l| clf.count(l)).collect();
        println!("sample 0: {} building pixels, per-level pixels {levels:?}", loc.count(1));
    }
    let mut model = Model::new(Task::Bda, cfg.model_config(), cfg.seed);
    let losses = fit(&mut model, &samples, &cfg, &mut ())?;
    println!("loss {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);
    let (report, _) = evaluate(&model, &samples, None)?;
    print!("{}", report.to_text());
    Ok(())
}
