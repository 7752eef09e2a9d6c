//! Optimization, training runs and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blocks::GateMode;
use crate::checkpoint;
use crate::data::{self, augment, perturb, Labels, Perturbation, Sample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{scd_confusion, BdaConfusion, BinaryConfusion, MetricReport};
use crate::models::{Model, ModelConfig, Prediction, Task, Variant};
use crate::nn::ParamStore;
use crate::ssm::Discretization;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter; `grads` is aligned with the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if self.m.is_empty() {
            self.m = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            if g.len() != p.numel() {
                return Err(Error::Invalid(format!("gradient {i} has the wrong size")));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= self.lr * self.weight_decay * *w;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Settings of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub variant: Variant,
    pub gate_mode: GateMode,
    pub discretization: Discretization,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub iters: usize,
    pub seed: u64,
    /// Random rotations and flips of every drawn sample.
    pub augment: bool,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Threads computing per-sample gradients; 1 is fully sequential.
    pub workers: usize,
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Bcd,
            variant: Variant::Micro,
            gate_mode: GateMode::default(),
            discretization: Discretization::default(),
            lr: 1e-4,
            weight_decay: 5e-3,
            batch: 16,
            iters: 1000,
            seed: 0,
            augment: true,
            checkpoint_every: 100,
            workers: 1,
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Invalid(format!("bad value {value:?} for {key}"))),
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.variant)
            .with_gate_mode(self.gate_mode)
            .with_discretization(self.discretization)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => self.task = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "gate_mode" => self.gate_mode = value.parse()?,
            "discretization" => self.discretization = value.parse()?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "data" => self.data = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Invalid("batch must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Invalid("workers must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Invalid("lr and weight_decay must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradient(model: &Model, sample: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true);
    let x1 = g.constant(sample.t1.clone());
    let x2 = g.constant(sample.t2.clone());
    let out = model.forward(&mut g, &p, x1, x2)?;
    let loss = model.loss(&mut g, &out, &sample.labels)?;
    g.backward(loss, &Tensor::full(g.shape(loss), 1.0))?;
    Ok((g.value(loss).item(), p.grads(&g)))
}

/// Mean loss and mean gradient over a batch. Per-sample results are reduced
/// in batch order, so the outcome does not depend on `workers`.
pub fn batch_gradient(model: &Model, batch: &[Sample], workers: usize) -> Result<(f64, Vec<Tensor>)> {
    let per_sample: Vec<Result<(f64, Vec<Tensor>)>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        pool.install(|| batch.par_iter().map(|s| sample_gradient(model, s)).collect())
    } else {
        batch.iter().map(|s| sample_gradient(model, s)).collect()
    };
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor>> = None;
    for r in per_sample {
        let (l, grads) = r?;
        loss += l;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = total.ok_or_else(|| Error::Invalid("empty batch".into()))?;
    for g in &mut grads {
        for x in g.data_mut() {
            *x /= n;
        }
    }
    Ok((loss / n, grads))
}

/// Draws batches by walking seeded permutations of the dataset.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(len: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn next(&mut self, size: usize) -> Vec<(usize, u64)> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                (self.order[self.pos - 1], self.rng.random())
            })
            .collect()
    }
}

/// Per-iteration hook of [`fit`].
pub trait TrainObserver {
    fn iteration(&mut self, _iter: usize, _loss: f64, _model: &Model) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Optimizes `model` on `samples` for `cfg.iters` iterations and returns the
/// batch losses.
pub fn fit(
    model: &mut Model,
    samples: &[Sample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.labels.task() != model.task) {
        return Err(Error::Invalid(format!(
            "sample {} has {} labels but the model is {}",
            s.id,
            s.labels.task(),
            model.task
        )));
    }
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut sampler = BatchSampler::new(samples.len(), cfg.seed ^ 0x5EED_BA7C);
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 1..=cfg.iters {
        let batch: Vec<Sample> = sampler
            .next(cfg.batch)
            .into_iter()
            .map(|(i, seed)| {
                if cfg.augment {
                    augment(&samples[i], seed)
                } else {
                    samples[i].clone()
                }
            })
            .collect();
        let (loss, grads) = batch_gradient(model, &batch, cfg.workers)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: iter, loss });
        }
        opt.step(&mut model.store, &grads)?;
        losses.push(loss);
        observer.iteration(iter, loss, model)?;
    }
    Ok(losses)
}

/// Appends `iter<TAB>loss` to `train.log` and writes periodic checkpoints.
struct RunFiles {
    log: fs::File,
    out: PathBuf,
    every: usize,
}

impl TrainObserver for RunFiles {
    fn iteration(&mut self, iter: usize, loss: f64, model: &Model) -> Result<()> {
        writeln!(self.log, "{iter}\t{loss}")?;
        if self.every > 0 && iter % self.every == 0 {
            checkpoint::save(&self.out.join(format!("checkpoint_{iter:06}.cmck")), &model.store)?;
        }
        Ok(())
    }
}

pub const TRAIN_LOG: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "model.cmck";

/// Trains on the dataset at `cfg.data` and writes `train.log`, periodic
/// checkpoints and `model.cmck` into `cfg.out`.
pub fn run_training(cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    if !cfg.data.join(data::MANIFEST).is_file() {
        return Err(Error::Invalid(format!("no dataset at {}", cfg.data.display())));
    }
    let dataset = data::load_dataset(&cfg.data)?;
    if dataset.task != cfg.task {
        return Err(Error::Invalid(format!(
            "dataset holds {} samples but the task is {}",
            dataset.task, cfg.task
        )));
    }
    fs::create_dir_all(&cfg.out)?;
    let mut files = RunFiles {
        log: fs::File::create(cfg.out.join(TRAIN_LOG))?,
        out: cfg.out.clone(),
        every: cfg.checkpoint_every,
    };
    let mut model = Model::new(cfg.task, cfg.model_config(), cfg.seed);
    fit(&mut model, &dataset.samples, cfg, &mut files)?;
    checkpoint::save(&cfg.out.join(FINAL_CHECKPOINT), &model.store)?;
    Ok(model)
}

/// Predicts every sample (optionally degraded) and scores the predictions.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    degrade: Option<(&Perturbation, u64)>,
) -> Result<(MetricReport, Vec<Prediction>)> {
    let predictions: Vec<Prediction> = samples
        .iter()
        .map(|s| match degrade {
            Some((p, seed)) => {
                let x1 = perturb(&s.t1, p, seed ^ (2 * s.id as u64))?;
                let x2 = perturb(&s.t2, p, seed ^ (2 * s.id as u64 + 1))?;
                model.predict(&x1, &x2)
            }
            None => model.predict(&s.t1, &s.t2),
        })
        .collect::<Result<_>>()?;
    let report = score(model, samples, &predictions)?;
    Ok((report, predictions))
}

/// Metric report of predictions against the samples' labels.
pub fn score(model: &Model, samples: &[Sample], predictions: &[Prediction]) -> Result<MetricReport> {
    let mut report = MetricReport::new();
    let mut change = BinaryConfusion::default();
    match model.task {
        Task::Bcd | Task::Scd => {
            let classes = model.config.semantic_classes + 1;
            let mut semantic = crate::metrics::SemanticConfusion::new(classes);
            for (s, pred) in samples.iter().zip(predictions) {
                match (pred, &s.labels) {
                    (Prediction::Bcd { change: p }, Labels::Bcd { change: y }) => change.accumulate(p, y)?,
                    (
                        Prediction::Scd { t1, t2, change: p },
                        Labels::Scd { t1: y1, t2: y2, change: y },
                    ) => {
                        change.accumulate(p, y)?;
                        semantic.merge(&scd_confusion(classes, (t1, t2, p), (y1, y2, y))?)?;
                    }
                    _ => return Err(Error::Invalid("prediction and label tasks differ".into())),
                }
            }
            report.add_bcd(&change.metrics()?);
            if model.task == Task::Scd {
                report.add_scd(&semantic.metrics()?);
            }
        }
        Task::Bda => {
            let mut conf = BdaConfusion::new(model.config.damage_classes);
            for (s, pred) in samples.iter().zip(predictions) {
                match (pred, &s.labels) {
                    (Prediction::Bda { loc, clf }, Labels::Bda { loc: yl, clf: yc }) => {
                        conf.accumulate(loc, clf, yl, yc)?
                    }
                    _ => return Err(Error::Invalid("prediction and label tasks differ".into())),
                }
            }
            report.add_bda(&conf.metrics());
        }
    }
    Ok(report)
}

pub const METRICS_FILE: &str = "metrics.txt";

/// Loads a checkpoint, evaluates the dataset at `data_dir` and writes
/// `metrics.txt` plus `pred/<map>/<id>.raster` into `out`.
pub fn run_evaluation(
    checkpoint_path: &Path,
    data_dir: &Path,
    config: ModelConfig,
    degrade: Option<(&Perturbation, u64)>,
    out: &Path,
) -> Result<MetricReport> {
    if !checkpoint_path.is_file() {
        return Err(Error::Invalid(format!("no checkpoint at {}", checkpoint_path.display())));
    }
    let dataset = data::load_dataset(data_dir)?;
    let mut model = Model::new(dataset.task, config, 0);
    checkpoint::load_into(checkpoint_path, &mut model.store)?;
    let (report, predictions) = evaluate(&model, &dataset.samples, degrade)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(METRICS_FILE), report.to_text())?;
    for (s, pred) in dataset.samples.iter().zip(&predictions) {
        for (name, map) in pred.maps() {
            let dir = out.join("pred").join(name);
            fs::create_dir_all(&dir)?;
            data::raster::save_labels(&dir.join(format!("{:04}.raster", s.id)), map)?;
        }
    }
    Ok(report)
}

/// Human-readable one-line summary of a report's headline metric.
pub fn headline(task: Task, report: &MetricReport) -> String {
    let mut s = String::new();
    let keys: &[&str] = match task {
        Task::Bcd => &["bcd.f1", "bcd.iou", "bcd.kappa"],
        Task::Scd => &["scd.miou", "scd.sek", "bcd.f1"],
        Task::Bda => &["bda.f1_overall", "bda.f1_loc", "bda.f1_clf"],
    };
    for k in keys {
        match report.get(k) {
            Some(v) => write!(s, "{k}={v:.4} ").unwrap(),
            None => write!(s, "{k}=undefined ").unwrap(),
        }
    }
    s.trim_end().to_string()
}
