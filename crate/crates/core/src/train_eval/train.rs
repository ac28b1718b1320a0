//! The training loop: seeded shuffling, Adam updates, per-epoch test
//! metrics, best-checkpoint selection and the history record.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{make_batches, Window};
use crate::error::{Error, Result};
use crate::model::{checkpoint_bytes, predictions, CheckpointMeta, Mode, Model};
use crate::seeding;
use crate::tensor::Graph;

use super::{adam_step, cross_entropy, AdamState, LrSchedule};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub shuffle: bool,
    pub seed: u64,
    /// When positive, that fraction of the training windows is carved off
    /// (deterministically) and best-model selection watches its loss instead
    /// of the test loss. The default of 0 mirrors selecting on test loss.
    pub val_fraction: f64,
}

impl TrainOptions {
    pub fn new(seed: u64) -> Self {
        TrainOptions {
            epochs: 200,
            batch_size: 64,
            schedule: LrSchedule::default(),
            shuffle: true,
            seed,
            val_fraction: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("train.batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Parameter(format!("train.val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        self.schedule.validate()
    }
}

/// One epoch's running training metrics and full-pass test metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch of the saved best checkpoint (None when no epoch ran).
    pub best_epoch: Option<usize>,
    pub best_selection_loss: Option<f64>,
    /// Serialized checkpoint at the best selection loss (the initial model
    /// when no epoch ran).
    pub best_checkpoint: Vec<u8>,
    /// Serialized checkpoint after the final epoch.
    pub last_checkpoint: Vec<u8>,
}

/// History rows in the on-disk CSV layout (full float precision).
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,train_acc,test_loss,test_acc,lr\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc, r.lr);
    }
    s
}

fn eval_loss_acc(model: &Model, windows: &[Window], batch_size: usize) -> Result<(f64, f64)> {
    let mut rng = seeding::rng_for(0, "eval-unused");
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in make_batches(windows, batch_size, false, &mut rng)? {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.inputs, Mode::Eval, &mut rng)?;
        let loss = cross_entropy(&mut g, out.logits, &batch.labels)?;
        loss_sum += g.data(loss)[0] * batch.len() as f64;
        let preds = predictions(&g.value(out.logits))?;
        correct += preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        total += batch.len();
    }
    Ok((loss_sum / total as f64, correct as f64 / total as f64))
}

/// Trains `model` in place. Fully deterministic under `opts.seed`: shuffling
/// and dropout share one seeded stream, so identical inputs reproduce the
/// history and checkpoints byte for byte.
///
/// When `out_dir` is given, `best.ckpt`, `last.ckpt` and `history.csv` are
/// (re)written there; `best.ckpt` is refreshed at every new selection-loss
/// minimum, including the initial state before any epoch.
pub fn train(
    model: &mut Model,
    train_windows: &[Window],
    test_windows: &[Window],
    opts: &TrainOptions,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    opts.validate()?;
    if train_windows.is_empty() || test_windows.is_empty() {
        return Err(Error::Contract("train: empty train or test set".into()));
    }
    let nf = model.config.num_features;
    if train_windows.iter().chain(test_windows).any(|w| w.num_features != nf || w.seq_len != model.config.seq_len) {
        return Err(Error::Contract("train: window shape disagrees with the model config".into()));
    }

    // optional validation carve-out for selection
    let (fit_windows, val_windows): (Vec<Window>, Vec<Window>) = if opts.val_fraction > 0.0 {
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut seeding::rng_for(opts.seed, "valsplit"));
        let val_len = ((train_windows.len() as f64 * opts.val_fraction) as usize).max(1);
        if val_len >= train_windows.len() {
            return Err(Error::Parameter("train.val_fraction leaves no training data".into()));
        }
        let (val_idx, fit_idx) = order.split_at(val_len);
        (
            fit_idx.iter().map(|&i| train_windows[i].clone()).collect(),
            val_idx.iter().map(|&i| train_windows[i].clone()).collect(),
        )
    } else {
        (train_windows.to_vec(), Vec::new())
    };

    let mut rng = seeding::rng_for(opts.seed, "train");
    let mut schedule = opts.schedule.clone();
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(opts.epochs);

    let meta_at = |epoch: Option<usize>, loss: Option<f64>, acc: Option<f64>| CheckpointMeta {
        seed: opts.seed,
        epoch,
        best_test_loss: loss,
        best_test_accuracy: acc,
    };

    let initial = checkpoint_bytes(&model.registry, &model.config, &meta_at(Some(0), None, None))?;
    let mut best_checkpoint = initial.clone();
    let mut best_epoch: Option<usize> = None;
    let mut best_selection: Option<f64> = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("best.ckpt"), &best_checkpoint)?;
    }

    for epoch in 1..=opts.epochs {
        let lr = schedule.current();
        let batches = make_batches(&fit_windows, opts.batch_size, opts.shuffle, &mut rng)?;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, batch) in batches.iter().enumerate() {
            let result: Result<(f64, usize)> = (|| {
                let mut g = Graph::new();
                let out = model.forward(&mut g, &batch.inputs, Mode::Train, &mut rng)?;
                let loss = cross_entropy(&mut g, out.logits, &batch.labels)?;
                let loss_value = g.data(loss)[0];
                let preds = predictions(&g.value(out.logits))?;
                let hits = preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
                g.backward(loss)?;
                model.registry.accumulate_grads(&g, &out.binding)?;
                adam_step(&mut model.registry, &mut adam, lr)?;
                model.registry.zero_grads();
                Ok((loss_value, hits))
            })();
            match result {
                Ok((loss_value, hits)) => {
                    loss_sum += loss_value * batch.len() as f64;
                    correct += hits;
                }
                Err(e @ Error::Numeric { .. }) => {
                    return Err(Error::Divergence { epoch, step, source: Box::new(e) })
                }
                Err(other) => return Err(other),
            }
        }
        let fit_total: usize = fit_windows.len();
        let (test_loss, test_acc) = eval_loss_acc(model, test_windows, opts.batch_size)?;
        let selection_loss = if val_windows.is_empty() {
            test_loss
        } else {
            eval_loss_acc(model, &val_windows, opts.batch_size)?.0
        };

        if best_selection.map_or(true, |b| selection_loss < b) {
            best_selection = Some(selection_loss);
            best_epoch = Some(epoch);
            best_checkpoint = checkpoint_bytes(
                &model.registry,
                &model.config,
                &meta_at(Some(epoch), Some(selection_loss), Some(test_acc)),
            )?;
            if let Some(dir) = out_dir {
                fs::write(dir.join("best.ckpt"), &best_checkpoint)?;
            }
        }
        schedule.observe(selection_loss);
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / fit_total as f64,
            train_acc: correct as f64 / fit_total as f64,
            test_loss,
            test_acc,
            lr,
        });
    }

    let last_meta = meta_at(Some(opts.epochs), best_selection, None);
    let last_checkpoint = if opts.epochs == 0 { initial } else { checkpoint_bytes(&model.registry, &model.config, &last_meta)? };
    if let Some(dir) = out_dir {
        fs::write(dir.join("last.ckpt"), &last_checkpoint)?;
        fs::write(dir.join("history.csv"), history_csv(&history))?;
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_selection_loss: best_selection,
        best_checkpoint,
        last_checkpoint,
    })
}
