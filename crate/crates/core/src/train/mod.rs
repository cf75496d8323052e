//! Optimizer, schedule, configuration and the file-producing training run.

pub mod config;
mod eval;
pub mod optim;
mod trainer;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub use config::{Precision, RunConfig};
pub use eval::{evaluate_samples, load_model, predict_image, EvalOutcome};
pub use optim::{sgd_step, Decay, LrSchedule, OptimState};
pub use trainer::{TraceRow, Trainer};

use crate::data::{load_dataset, synth_generate, Checkpoint, SegSample};
use crate::error::{Error, Result};
use crate::real::Real;

pub const TRACE_FILE: &str = "loss.csv";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_GOOD_CKPT: &str = "last_good.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

/// The configured dataset: files from `data.dir`, else synthetic samples
/// drawn from the run seed.
pub fn load_training_data(cfg: &RunConfig) -> Result<Vec<SegSample>> {
    match &cfg.data.dir {
        Some(dir) => Ok(load_dataset(dir)?.into_iter().map(|(_, s)| s).collect()),
        None => synth_generate(cfg.data.count, cfg.data.extent, cfg.run.seed, cfg.difficulty()?),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub iterations: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub best_loss: f64,
    pub out_dir: PathBuf,
}

fn open_trace(path: &Path, append: bool) -> Result<File> {
    let fresh = !append || !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{}", TraceRow::CSV_HEADER).map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Trains per `cfg`, writing the loss trace, `final.ckpt`, `best.ckpt`,
/// optional periodic checkpoints and a copy of the config into the output
/// directory. With `resume`, continues from a checkpoint written by an
/// earlier run and appends to its trace. On failure the state before the
/// failing step is saved as `last_good.ckpt`.
pub fn train_run<T: Real>(cfg: &RunConfig, resume: Option<&Path>) -> Result<RunSummary> {
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
    let samples = load_training_data(cfg)?;
    let mut tr: Trainer<T> = match resume {
        Some(p) => Trainer::resume(cfg.clone(), samples, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone(), samples)?,
    };
    let trace_path = dir.join(TRACE_FILE);
    let mut trace = open_trace(&trace_path, resume.is_some())?;
    let every = cfg.run.checkpoint_every;
    let mut first = None;
    let mut last = None;
    while tr.iteration < cfg.run.iterations {
        let before = tr.checkpoint()?;
        let row = match tr.step() {
            Ok(r) => r,
            Err(e) => {
                before.save(dir.join(LAST_GOOD_CKPT))?;
                return Err(e);
            }
        };
        writeln!(trace, "{}", row.csv()).map_err(|e| Error::io(&trace_path, e))?;
        first.get_or_insert(row.loss);
        last = Some(row.loss);
        if every > 0 && tr.iteration % every == 0 {
            tr.checkpoint()?.save(dir.join(format!("iter_{}.ckpt", tr.iteration)))?;
        }
    }
    tr.checkpoint()?.save(dir.join(FINAL_CKPT))?;
    if let Some(best) = tr.best_params() {
        Checkpoint::from_store(best)?.save(dir.join(BEST_CKPT))?;
    }
    Ok(RunSummary {
        iterations: tr.iteration,
        first_loss: first,
        final_loss: last,
        best_loss: tr.best_loss,
        out_dir: dir,
    })
}

/// Parses a trace written by [`train_run`].
pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        kind: "loss trace",
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(TraceRow::CSV_HEADER) {
        return Err(bad("missing header".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("line {l:?} has {} fields", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            Ok(TraceRow {
                iteration: f[0].parse().map_err(|_| bad(format!("bad iteration {:?}", f[0])))?,
                loss: num(f[1])?,
                ce: num(f[2])?,
                mae: num(f[3])?,
                lr: num(f[4])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
