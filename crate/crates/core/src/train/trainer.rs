use rand::seq::SliceRandom;

use super::config::RunConfig;
use super::optim::{sgd_step, LrSchedule, OptimState};
use crate::autograd::Tape;
use crate::data::{stack_batch, Checkpoint, SegSample};
use crate::error::{Error, Result};
use crate::metrics::{iou, MaskPair, DEFAULT_THRESHOLD};
use crate::model::{fused_loss, network_forward, DsfNet};
use crate::nn::Mode;
use crate::params::{Ctx, ParamStore};
use crate::real::Real;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// One line of the loss trace; the loss is measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub ce: f64,
    pub mae: f64,
    pub lr: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "iteration,loss,ce,mae,lr";

    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.iteration, self.loss, self.ce, self.mae, self.lr)
    }
}

const ITERATION_KEY: &str = "train.iteration";
const BEST_KEY: &str = "train.best_loss";

fn velocity_key(name: &str) -> String {
    format!("train.velocity.{name}")
}

/// SGD training over an in-memory sample set. Batch `t` is a pure function of
/// `(seed, t)`: sample positions `t·b … t·b+b−1` of the concatenated
/// per-epoch shuffles, so a resumed run sees the same batches.
pub struct Trainer<T> {
    pub cfg: RunConfig,
    pub net: DsfNet<T>,
    pub optim: OptimState<T>,
    pub schedule: LrSchedule,
    samples: Vec<SegSample>,
    /// Completed iterations.
    pub iteration: usize,
    pub best_loss: f64,
    best_params: Option<ParamStore<T>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: RunConfig, samples: Vec<SegSample>) -> Result<Self> {
        cfg.validate()?;
        if samples.len() < cfg.run.batch_size {
            return Err(Error::config(format!(
                "{} samples cannot fill a batch of {}",
                samples.len(),
                cfg.run.batch_size
            )));
        }
        let net_cfg = cfg.net_config();
        let e = net_cfg.input_extent;
        if let Some(s) = samples.iter().find(|s| s.extent() != (e, e)) {
            return Err(Error::shape(format!("sample {} is {:?}, model expects {e}×{e}", s.meta, s.extent())));
        }
        let net = DsfNet::new(net_cfg, cfg.run.seed)?;
        let optim = OptimState::new(&net.params, cfg.optim.momentum, cfg.optim.weight_decay)?;
        Ok(Trainer {
            schedule: cfg.schedule(),
            cfg,
            net,
            optim,
            samples,
            iteration: 0,
            best_loss: f64::INFINITY,
            best_params: None,
        })
    }

    pub fn samples(&self) -> &[SegSample] {
        &self.samples
    }

    pub fn epoch_of(&self, iteration: usize) -> usize {
        iteration * self.cfg.run.batch_size / self.samples.len()
    }

    pub fn batch_indices(&self, iteration: usize) -> Vec<usize> {
        let (n, b) = (self.samples.len(), self.cfg.run.batch_size);
        let mut epoch = usize::MAX;
        let mut order: Vec<usize> = Vec::new();
        (iteration * b..(iteration + 1) * b)
            .map(|pos| {
                if pos / n != epoch {
                    epoch = pos / n;
                    order = (0..n).collect();
                    order.shuffle(&mut stream(self.cfg.run.seed, Purpose::Shuffle, epoch as u32));
                }
                order[pos % n]
            })
            .collect()
    }

    /// Forward, backward and one SGD update on the next batch.
    pub fn step(&mut self) -> Result<TraceRow> {
        let t = self.iteration;
        let lr = self.schedule.lr_at(self.epoch_of(t));
        let (x, g) = stack_batch::<T>(&self.samples, &self.batch_indices(t))?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut ctx = Ctx::new(&mut tape, &mut self.net.params, Mode::Train);
        let out = network_forward(&mut ctx, &self.net.cfg, xv)?;
        let bound: Vec<(String, crate::autograd::Var)> = ctx.bindings().map(|(n, v)| (n.to_string(), v)).collect();
        drop(ctx);
        let parts = fused_loss(&mut tape, out.map, &g)?;
        let value = |v| tape.value(v).item().map(|x: T| x.as_f64());
        let row = TraceRow {
            iteration: t,
            loss: value(parts.total)?,
            ce: value(parts.ce)?,
            mae: value(parts.mae)?,
            lr,
        };
        if !row.loss.is_finite() {
            return Err(Error::NonFinite("fused loss"));
        }
        let grads = tape.backward(parts.total)?;
        let grads = bound.into_iter().map(|(n, v)| (n, grads.wrt(v).clone())).collect();
        if row.loss < self.best_loss {
            self.best_loss = row.loss;
            self.best_params = Some(self.net.params.clone());
        }
        sgd_step(&mut self.net.params, &grads, &mut self.optim, lr)?;
        self.iteration += 1;
        Ok(row)
    }

    /// Steps until `until` iterations are complete.
    pub fn run_until(&mut self, until: usize, mut on_row: impl FnMut(&TraceRow) -> Result<()>) -> Result<Vec<TraceRow>> {
        let mut rows = Vec::new();
        while self.iteration < until {
            let row = self.step()?;
            on_row(&row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Parameters at the lowest loss seen by this trainer, if any step ran.
    pub fn best_params(&self) -> Option<&ParamStore<T>> {
        self.best_params.as_ref()
    }

    /// Parameters, norm statistics, velocities and the iteration counter.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_store(&self.net.params)?;
        for (name, v) in &self.optim.velocity {
            ck.insert(velocity_key(name), v)?;
        }
        ck.insert(ITERATION_KEY, &Tensor::<f64>::scalar(self.iteration as f64))?;
        ck.insert(BEST_KEY, &Tensor::<f64>::scalar(self.best_loss.min(f32::MAX as f64)))?;
        Ok(ck)
    }

    /// A trainer continuing from [`Trainer::checkpoint`] output.
    pub fn resume(cfg: RunConfig, samples: Vec<SegSample>, ck: &Checkpoint) -> Result<Self> {
        let mut tr = Self::new(cfg, samples)?;
        let scalar = |key: &str| -> Result<f64> {
            let t = ck.get(key).ok_or_else(|| Error::config(format!("checkpoint lacks {key}")))?;
            Ok(t.item()? as f64)
        };
        let iteration = scalar(ITERATION_KEY)?;
        let best = scalar(BEST_KEY)?;
        let mut velocity = tr.optim.velocity.clone();
        for (name, v) in velocity.iter_mut() {
            let saved = ck
                .get(&velocity_key(name))
                .ok_or_else(|| Error::config(format!("checkpoint lacks velocity for {name}")))?;
            if saved.shape() != v.shape() {
                return Err(Error::shape(format!("velocity {name}: {:?} vs {:?}", saved.shape(), v.shape())));
            }
            *v = saved.cast();
        }
        ck.restore_store(&mut tr.net.params)?;
        tr.optim.velocity = velocity;
        tr.iteration = iteration as usize;
        tr.best_loss = best;
        Ok(tr)
    }

    /// Consecutive batches covering every sample; a lone trailing sample
    /// joins the previous batch so train-mode norms still see two.
    fn chunks(&self) -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..self.samples.len()).collect();
        let mut out: Vec<Vec<usize>> = idx.chunks(self.cfg.run.batch_size).map(<[usize]>::to_vec).collect();
        if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
            let last = out.pop().unwrap();
            out.last_mut().unwrap().extend(last);
        }
        out
    }

    /// Mean fused loss over the whole set in consecutive batches. Train mode
    /// runs on a copy so the running statistics are left alone.
    pub fn dataset_loss(&self, mode: Mode) -> Result<f64> {
        let mut params = self.net.params.clone();
        let (mut total, mut weight) = (0.0, 0usize);
        for chunk in &self.chunks() {
            let (x, g) = stack_batch::<T>(&self.samples, chunk)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let mut ctx = Ctx::new(&mut tape, &mut params, mode);
            let out = network_forward(&mut ctx, &self.net.cfg, xv)?;
            let parts = fused_loss(&mut tape, out.map, &g)?;
            total += tape.value(parts.total).item()?.as_f64() * chunk.len() as f64;
            weight += chunk.len();
        }
        Ok(total / weight as f64)
    }

    /// Eval-mode predictions for every sample.
    pub fn predict_all(&mut self) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::new();
        for chunk in &self.chunks() {
            let (x, _) = stack_batch::<T>(&self.samples, chunk)?;
            let maps = self.net.predict(&x)?;
            let (h, w) = (maps.shape()[2], maps.shape()[3]);
            for k in 0..chunk.len() {
                out.push(Tensor::new(vec![1, h, w], maps.data()[k * h * w..(k + 1) * h * w].to_vec())?);
            }
        }
        Ok(out)
    }

    /// Mean IoU of eval-mode predictions at threshold 0.5.
    pub fn mean_iou(&mut self) -> Result<f64> {
        let preds = self.predict_all()?;
        let mut sum = 0.0;
        for (p, s) in preds.iter().zip(&self.samples) {
            sum += iou(&MaskPair::from_tensors(&p.cast::<f64>(), &s.mask)?, DEFAULT_THRESHOLD)?;
        }
        Ok(sum / preds.len() as f64)
    }
}
