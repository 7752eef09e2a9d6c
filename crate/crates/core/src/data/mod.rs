//! Samples, on-disk datasets, synthetic generation and image transforms.

pub mod augment;
pub mod perturb;
pub mod raster;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::models::Task;
use crate::tensor::Tensor;

pub use augment::{augment, Augmentation};
pub use perturb::{perturb, Perturbation};
pub use synth::{generate_sample, synth_generate, SynthConfig};

/// Task-specific ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    Bcd {
        change: LabelMap,
    },
    /// Land cover of each epoch (0 where unchanged) and the change mask.
    Scd {
        t1: LabelMap,
        t2: LabelMap,
        change: LabelMap,
    },
    /// Building footprint (0/1) and per-pixel damage level (0 off buildings).
    Bda {
        loc: LabelMap,
        clf: LabelMap,
    },
}

impl Labels {
    pub fn task(&self) -> Task {
        match self {
            Labels::Bcd { .. } => Task::Bcd,
            Labels::Scd { .. } => Task::Scd,
            Labels::Bda { .. } => Task::Bda,
        }
    }

    /// Binary change map; for damage assessment, damaged building pixels.
    pub fn change(&self) -> LabelMap {
        match self {
            Labels::Bcd { change } | Labels::Scd { change, .. } => change.clone(),
            Labels::Bda { clf, .. } => LabelMap {
                height: clf.height,
                width: clf.width,
                data: clf.data.iter().map(|&v| u8::from(v >= 2 && v != crate::label::IGNORE)).collect(),
            },
        }
    }
}

/// A co-registered image pair (`H x W x 3`, values in `[0, 1]`) with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub t1: Tensor,
    pub t2: Tensor,
    pub labels: Labels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub samples: Vec<Sample>,
}

pub const MANIFEST: &str = "manifest.txt";

/// Relative raster paths of one sample, in manifest order.
fn sample_paths(task: Task, id: usize) -> Vec<String> {
    let dirs: &[&str] = match task {
        Task::Bcd => &["T1", "T2", "GT_BCD"],
        Task::Scd => &["T1", "T2", "GT_BCD", "GT_T1", "GT_T2"],
        Task::Bda => &["T1", "T2", "GT_BCD", "GT_LOC", "GT_CLF"],
    };
    dirs.iter().map(|d| format!("{d}/{id:04}.raster")).collect()
}

/// Writes samples under `dir` with one raster per image/label map and a
/// tab-separated manifest.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(Error::Invalid("refusing to write an empty dataset".into()));
    };
    let task = first.labels.task();
    let mut manifest = String::new();
    for s in samples {
        if s.labels.task() != task {
            return Err(Error::Invalid("dataset mixes tasks".into()));
        }
        let paths = sample_paths(task, s.id);
        for p in &paths {
            if let Some(parent) = dir.join(p).parent() {
                fs::create_dir_all(parent)?;
            }
        }
        raster::save_tensor(&dir.join(&paths[0]), &s.t1)?;
        raster::save_tensor(&dir.join(&paths[1]), &s.t2)?;
        raster::save_labels(&dir.join(&paths[2]), &s.labels.change())?;
        match &s.labels {
            Labels::Bcd { .. } => {}
            Labels::Scd { t1, t2, .. } => {
                raster::save_labels(&dir.join(&paths[3]), t1)?;
                raster::save_labels(&dir.join(&paths[4]), t2)?;
            }
            Labels::Bda { loc, clf } => {
                raster::save_labels(&dir.join(&paths[3]), loc)?;
                raster::save_labels(&dir.join(&paths[4]), clf)?;
            }
        }
        manifest.push_str(&format!("{:04}\t{}\n", s.id, paths.join("\t")));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Task of a dataset directory, from its ground-truth folders.
pub fn detect_task(dir: &Path) -> Result<Task> {
    if dir.join("GT_LOC").is_dir() {
        Ok(Task::Bda)
    } else if dir.join("GT_T1").is_dir() {
        Ok(Task::Scd)
    } else if dir.join("GT_BCD").is_dir() {
        Ok(Task::Bcd)
    } else {
        Err(Error::Invalid(format!("{} is not a dataset directory", dir.display())))
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Invalid(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let task = detect_task(dir)?;
    let expected = sample_paths(task, 0).len();
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != expected + 1 {
            return Err(Error::Format(format!(
                "manifest line {} has {} fields, expected {}",
                n + 1,
                fields.len(),
                expected + 1
            )));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad sample id {:?}", fields[0])))?;
        let p: Vec<PathBuf> = fields[1..].iter().map(|f| dir.join(f)).collect();
        let labels = match task {
            Task::Bcd => Labels::Bcd {
                change: raster::load_labels(&p[2])?,
            },
            Task::Scd => Labels::Scd {
                t1: raster::load_labels(&p[3])?,
                t2: raster::load_labels(&p[4])?,
                change: raster::load_labels(&p[2])?,
            },
            Task::Bda => Labels::Bda {
                loc: raster::load_labels(&p[3])?,
                clf: raster::load_labels(&p[4])?,
            },
        };
        samples.push(Sample {
            id,
            t1: raster::load_tensor(&p[0])?,
            t2: raster::load_tensor(&p[1])?,
            labels,
        });
    }
    if samples.is_empty() {
        return Err(Error::Invalid(format!("{} lists no samples", manifest_path.display())));
    }
    Ok(Dataset { task, samples })
}
