use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stsmcd::bench::{run_bench, to_csv, BenchOptions};
use stsmcd::data::{synth_generate, Perturbation, SynthConfig};
use stsmcd::gradcheck::{run_suite, CheckStatus, Scope};
use stsmcd::train::{headline, run_evaluation, run_training, TrainConfig};
use stsmcd::{Error, ModelConfig, Result, Task, Variant};

#[derive(Parser)]
#[command(name = "stsmcd", version, about = "State space change detection: synth, train, eval, gradcheck, bench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic change-detection dataset.
    Synth {
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Square image side; a positive multiple of 32.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 6)]
        semantic_classes: usize,
        #[arg(long, default_value_t = 4)]
        damage_classes: usize,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a model; writes train.log and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Degrade inputs first: blur:SIGMA, noise:SIGMA or scale:RATIO.
        #[arg(long)]
        perturb: Option<Perturbation>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// all, primitives, blocks, models, or one primitive/block/model name.
        #[arg(long, default_value = "all")]
        scope: Scope,
    },
    /// Scan vs attention wall-time scaling, as CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value = "micro")]
    variant: Variant,
    #[arg(long)]
    gate_mode: Option<String>,
    #[arg(long)]
    discretization: Option<String>,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.variant);
        if let Some(g) = &self.gate_mode {
            cfg = cfg.with_gate_mode(g.parse()?);
        }
        if let Some(d) = &self.discretization {
            cfg = cfg.with_discretization(d.parse()?);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// File of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    gate_mode: Option<String>,
    #[arg(long)]
    discretization: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(seed) = env_seed()? {
            cfg.seed = seed;
        }
        if let Some(path) = &self.config {
            cfg.apply_text(&std::fs::read_to_string(path)?)?;
        }
        let flags = [
            ("task", &self.task),
            ("variant", &self.variant),
            ("gate_mode", &self.gate_mode),
            ("discretization", &self.discretization),
            ("lr", &self.lr),
            ("weight_decay", &self.weight_decay),
            ("batch", &self.batch),
            ("iters", &self.iters),
            ("seed", &self.seed),
            ("augment", &self.augment),
            ("checkpoint_every", &self.checkpoint_every),
            ("workers", &self.workers),
            ("data", &self.data),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

const SEED_VAR: &str = "STSMCD_SEED";

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Invalid(format!("{SEED_VAR}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    Ok(seed.or(env_seed()?).unwrap_or(0))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            task,
            count,
            size,
            seed,
            semantic_classes,
            damage_classes,
            out,
        } => {
            let mut cfg = SynthConfig::new(task, count, size, seed_or_env(seed)?);
            cfg.semantic_classes = semantic_classes;
            cfg.damage_classes = damage_classes;
            let samples = synth_generate(&cfg, &out)?;
            println!("wrote {} {task} samples to {}", samples.len(), out.display());
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            run_training(&cfg)?;
            println!("trained {} for {} iterations; outputs in {}", cfg.task, cfg.iters, cfg.out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            model,
            perturb,
            seed,
        } => {
            if let Some(p) = &perturb {
                p.validate()?;
            }
            let seed = seed_or_env(seed)?;
            let task = stsmcd::data::detect_task(&data)?;
            let report = run_evaluation(&checkpoint, &data, model.config()?, perturb.as_ref().map(|p| (p, seed)), &out)?;
            println!("{}", headline(task, &report));
        }
        Command::Gradcheck { scope } => {
            let reports = run_suite(&scope)?;
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| r.status == CheckStatus::Failed).count();
            if failed > 0 {
                return Err(Error::Invalid(format!("{failed} of {} gradient checks failed", reports.len())));
            }
        }
        Command::Bench {
            lengths,
            repeats,
            channels,
            state,
            out,
        } => {
            let opts = BenchOptions {
                channels,
                state,
                repeats,
                ..BenchOptions::default()
            };
            let csv = to_csv(&run_bench(&lengths, &opts)?);
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
