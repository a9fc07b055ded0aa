//! The epoch loop: seeded mini-batches, cross-entropy, Adam, temperature
//! annealing, validation and best-checkpoint retention.

use std::path::Path;

use log::info;
use serde::Serialize;

use crate::densenet::EkgNet;
use crate::error::{Error, Result};
use crate::hsi::{PatchDataset, Split};
use crate::metrics::{argmax_rows, ConfusionMatrix};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamStore, Session};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::kernels;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Root seed of the batch order.
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::config("lr", "learning rate must be positive"));
        }
        if self.patience == Some(0) {
            return Err(Error::config("patience", "must be at least 1 when set"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tau: f64,
    pub train_loss: f64,
    pub train_oa: f64,
    pub val_loss: Option<f64>,
    pub val_oa: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters were retained (highest validation OA, earliest on ties).
    pub best_epoch: usize,
    pub best_val_oa: Option<f64>,
    /// Parameters (and buffers) at the best epoch.
    pub best: ParamStore<T>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub mean_loss: f64,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.confusion.trace() as f64 / self.confusion.total() as f64
    }
}

/// Splits a shuffled index list into batches; a trailing batch of one sample
/// joins the previous batch so batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = order.len() - size - 1;
        *out.last_mut().expect("at least one batch remains") = &order[start..];
    }
    out
}

/// Runs one training step on `idx` and returns `(loss, correct predictions)`.
pub fn train_step<T: Scalar>(
    model: &EkgNet,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    ds: &PatchDataset,
    idx: &[usize],
) -> Result<(f64, usize)> {
    let (x, targets) = ds.batch::<T>(idx)?;
    store.zero_grads();
    let mut sess = Session::new(store, true);
    let xv = sess.input(x);
    let logits = model.forward(&mut sess, xv)?;
    let preds = argmax_rows(sess.value(logits)?.data(), model.cfg.num_classes);
    let loss = sess.tape.cross_entropy(logits, &targets)?;
    let loss = sess.backward(loss)?.as_f64();
    adam.step(store)?;
    let correct = preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
    Ok((loss, correct))
}

/// Inference-mode predictions over `idx`, tallied into a confusion matrix.
pub fn evaluate<T: Scalar>(
    model: &EkgNet,
    store: &mut ParamStore<T>,
    ds: &PatchDataset,
    idx: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    if idx.is_empty() {
        return Err(Error::EmptyInput("nothing to evaluate".into()));
    }
    let c = model.cfg.num_classes;
    let mut cm = ConfusionMatrix::new(c);
    let mut loss = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, targets) = ds.batch::<T>(chunk)?;
        let logits = model.logits(store, x, false)?;
        let (l, _) = kernels::cross_entropy(logits.data(), logits.shape(), &targets)?;
        loss += l.as_f64() * chunk.len() as f64;
        for (p, &t) in argmax_rows(logits.data(), c).into_iter().zip(&targets) {
            cm.add(t, p)?;
        }
    }
    Ok(Evaluation {
        confusion: cm,
        mean_loss: loss / idx.len() as f64,
    })
}

/// Trains `model` in place on the training split of `ds`.
///
/// Each epoch first anneals the mapping temperatures, then visits the
/// training patches in a freshly shuffled order, then scores the validation
/// split. `store` ends with the final-epoch parameters; the best-validation
/// parameters are returned in the outcome.
pub fn train<T: Scalar>(
    model: &EkgNet,
    store: &mut ParamStore<T>,
    ds: &PatchDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::config("ratios", "the training split is empty"));
    }
    let val_idx = ds.indices(Split::Val);
    let mut adam = Adam::new(store, cfg.adam)?;
    let mut rng = SeededRng::stream(cfg.seed, "shuffle");
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Option<f64>, ParamStore<T>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        model.update_temperature(store, epoch)?;
        let tau = model.temperature(store)?;
        let mut order = train_idx.clone();
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for b in batches(&order, cfg.batch_size) {
            let (l, c) = train_step(model, store, &mut adam, ds, b)?;
            loss_sum += l * b.len() as f64;
            correct += c;
        }
        let (val_loss, val_oa) = if val_idx.is_empty() {
            (None, None)
        } else {
            let ev = evaluate(model, store, ds, &val_idx, cfg.batch_size)?;
            (Some(ev.mean_loss), Some(ev.accuracy()))
        };
        let rec = EpochRecord {
            epoch,
            tau,
            train_loss: loss_sum / train_idx.len() as f64,
            train_oa: correct as f64 / train_idx.len() as f64,
            val_loss,
            val_oa,
        };
        info!(
            "epoch {epoch}: tau {tau:.3} loss {:.5} oa {:.4} val_oa {:?}",
            rec.train_loss, rec.train_oa, rec.val_oa
        );
        log.push(rec);
        let improved = match (&best, val_oa) {
            (None, _) => true,
            (Some((_, Some(b), _)), Some(v)) => v > *b,
            // Without a validation split the latest parameters are kept.
            (Some(_), None) => true,
            (Some((_, None, _)), Some(_)) => true,
        };
        if improved {
            best = Some((epoch, val_oa, store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_oa, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_oa,
        best,
        stopped_early,
    })
}

/// Writes the log as CSV: `epoch,tau,train_loss,train_oa,val_loss,val_oa`.
pub fn write_log_csv(path: impl AsRef<Path>, log: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for rec in log {
        w.serialize(rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batching_absorbs_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&order[..1], 4);
        assert_eq!(b.len(), 1);
        let b = batches(&order, 3);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![3, 3, 3]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let mut c = TrainConfig::default();
        c.adam.lr = 0.0;
        assert!(c.validate().is_err());
    }
}
