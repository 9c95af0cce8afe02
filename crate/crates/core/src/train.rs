//! Training loop.

use std::io::Write;

use gazecast_tensor::{AdamW, Element, Tape};
use rand::seq::SliceRandom;

use crate::data::SceneSample;
use crate::error::{GazeError, Result};
use crate::fusion::sample_dropout_plan;
use crate::heads::LossBreakdown;
use crate::model::{Batch, GazeModel};
use crate::nn::init_rng;

pub const BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Joint gradient L2 norm before any clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// Mean total loss of one epoch.
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let xs: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.epoch == epoch)
            .map(|s| s.loss.total)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,epoch,L_gaze,L_dir,L_io,L_att,L_total")?;
        for s in &self.steps {
            let l = &s.loss;
            writeln!(
                w,
                "{},{},{:e},{:e},{:e},{:e},{:e}",
                s.step, s.epoch, l.gaze, l.dir, l.io, l.att, l.total
            )?;
        }
        Ok(())
    }
}

/// Sample order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut init_rng(seed, &format!("train.epoch{epoch}")));
    idx
}

/// Trains in place for `config.train.epochs` epochs.
///
/// `on_step` sees every step as it happens. A non-finite loss stops training
/// with [`GazeError::Diverged`].
pub fn train<T: Element>(
    model: &mut GazeModel<T>,
    samples: &[SceneSample],
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainLog> {
    if samples.is_empty() {
        return Err(GazeError::Data("training set is empty".into()));
    }
    let cfg = model.config.clone();
    let tc = &cfg.train;
    let p_drop = cfg.p_drop();
    let active = model.modalities();
    let mut opt = AdamW::<T>::new(tc.lr, BETAS, tc.weight_decay, ADAM_EPS);
    let mut drop_rng = init_rng(cfg.seed, "train.dropout");
    let mut tape = Tape::<T>::new();
    let mut log = TrainLog::default();
    let mut step = 0u64;
    for epoch in 0..tc.epochs {
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        for chunk in order.chunks(tc.batch_size) {
            let refs: Vec<&SceneSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch = Batch::<T>::from_samples(&refs, &cfg)?;
            let plan = sample_dropout_plan(&active, p_drop, &mut drop_rng)?;
            tape.reset();
            let (_, loss, bd) = model.forward_loss(&mut tape, &batch, &plan)?;
            if !bd.is_finite() {
                return Err(GazeError::Diverged(format!(
                    "non-finite loss at step {step} (epoch {epoch}): {bd:?}"
                )));
            }
            let grads = tape.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate(&grads);
            model.store.fill_missing_grads();
            let grad_norm = match tc.grad_clip {
                Some(max_norm) => model.store.clip_grad_norm(max_norm),
                None => model.store.grad_norm(),
            };
            opt.step(&mut model.store)?;
            let rec = StepRecord { step, epoch, loss: bd, grad_norm };
            on_step(&rec);
            log.steps.push(rec);
            step += 1;
        }
    }
    Ok(log)
}
