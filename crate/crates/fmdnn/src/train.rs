//! The SGD training loop and split evaluation.
//!
//! Determinism contract: one RNG stream seeded from the config drives the
//! epoch shuffles and augmentation draws in a fixed order, and every
//! forward pass is pure, so identical configs and datasets give
//! bit-identical loss histories.

use fmdnn_core::metrics::{compute_metrics, Confusion, Metrics};
use fmdnn_core::model::Fmdnn;
use fmdnn_core::{Graph, ParamId, Rng, Tensor};

use crate::augment::augment;
use crate::config::{DecayMode, RunConfig};
use crate::dataset::{split_dataset, Dataset};
use crate::ppm::load_image;
use crate::{Error, Result};

pub const CSV_HEADER: &str = "epoch,split,loss,acc,tpr,tnr,ppv,f1";

#[derive(Clone, Debug)]
pub struct HistoryRow {
    pub epoch: u32,
    pub split: &'static str,
    pub loss: f64,
    pub acc: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub ppv: f64,
    pub f1: f64,
}

impl HistoryRow {
    fn from_metrics(epoch: u32, split: &'static str, loss: f64, m: &Metrics) -> Self {
        HistoryRow {
            epoch,
            split,
            loss,
            acc: m.acc,
            tpr: m.tpr,
            tnr: m.tnr,
            ppv: m.ppv,
            f1: m.f1,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.split, self.loss, self.acc, self.tpr, self.tnr, self.ppv, self.f1
        )
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// A split loaded into memory. Desk-scale sets are small enough that
/// decoding every image once up front beats re-reading files per epoch.
pub struct LoadedSplit {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn load_split(ds: &Dataset, idxs: &[usize]) -> Result<LoadedSplit> {
    let mut images = Vec::with_capacity(idxs.len());
    let mut labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let s = &ds.samples[i];
        images.push(load_image(&s.path)?);
        labels.push(s.class);
    }
    Ok(LoadedSplit { images, labels })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Deterministic, augmentation-free pass over a split: mean loss plus the
/// usual macro metrics.
pub fn evaluate_model(model: &Fmdnn, set: &LoadedSplit) -> Result<(Metrics, f64)> {
    if set.is_empty() {
        return Err(Error::Input("evaluate: empty split".into()));
    }
    let k = model.cfg().classes;
    let mut conf = Confusion::new(k).map_err(Error::Core)?;
    let mut loss_sum = 0.0;
    for (img, &label) in set.images.iter().zip(&set.labels) {
        let mut g = Graph::new();
        let (loss, out) = model.loss(&mut g, img, label)?;
        loss_sum += g.value(loss).data[0];
        let pred = argmax(&g.value(out.logits).data);
        conf.record(label, pred).map_err(Error::Core)?;
    }
    let metrics = compute_metrics(&conf).map_err(Error::Core)?;
    Ok((metrics, loss_sum / set.len() as f64))
}

pub struct TrainOutcome {
    /// Model with the best-validation parameters restored (final-epoch
    /// parameters when there is no validation split).
    pub model: Fmdnn,
    pub best_epoch: u32,
    pub best_val_acc: f64,
    pub history: Vec<HistoryRow>,
    pub warnings: Vec<String>,
}

/// Run the full loop: split, per-epoch shuffled minibatch SGD, per-epoch
/// train and validation rows, best-validation parameter retention.
pub fn train(cfg: &RunConfig, ds: &Dataset, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let classes = ds.class_count();
    if classes < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 classes, dataset has {classes}"
        )));
    }
    let tp = &cfg.train;
    let split = split_dataset(ds, (tp.train_ratio, tp.val_ratio, tp.test_ratio), tp.seed)?;
    for w in &split.warnings {
        log(&format!("warning: {w}"));
    }
    let train_set = load_split(ds, &split.train)?;
    let val_set = load_split(ds, &split.val)?;
    if train_set.is_empty() {
        return Err(Error::Dataset("train split is empty".into()));
    }

    let model_cfg = cfg.model_config(classes)?;
    let side = model_cfg.image_size;
    let mut model = Fmdnn::new(model_cfg, tp.seed).map_err(Error::Core)?;
    log(&format!("model: {}", model.describe()));

    let mut rng = Rng::seed_from_u64(tp.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = tp.lr;
    let weight_decay = match tp.decay_mode {
        DecayMode::Weight => tp.decay,
        DecayMode::LrPerEpoch => 0.0,
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, u32, Vec<Tensor>)> = None;

    for epoch in 1..=tp.epochs as u32 {
        if tp.decay_mode == DecayMode::LrPerEpoch && epoch > 1 {
            lr *= 1.0 - tp.decay;
        }
        rng.shuffle(&mut order);

        let mut conf = Confusion::new(classes).map_err(Error::Core)?;
        let mut loss_sum = 0.0;
        for (bi, batch) in order.chunks(tp.batch_size).enumerate() {
            for &i in batch {
                let img = if tp.augment {
                    augment(&train_set.images[i], side, &mut rng)?
                } else {
                    train_set.images[i].clone()
                };
                let label = train_set.labels[i];
                let mut g = Graph::new();
                let (loss, out) = model.loss(&mut g, &img, label)?;
                let loss_val = g.value(loss).data[0];
                if !loss_val.is_finite() {
                    return Err(Error::Train(format!(
                        "non-finite loss {loss_val} at epoch {epoch}, batch {bi}"
                    )));
                }
                loss_sum += loss_val;
                conf.record(label, argmax(&g.value(out.logits).data))
                    .map_err(Error::Core)?;
                let scaled = g.mul_const(loss, 1.0 / batch.len() as f64);
                let grads = g.backward(scaled).map_err(Error::Core)?;
                model.store.accumulate(&g, &grads);
            }
            model.store.sgd_step(lr, weight_decay).map_err(Error::Core)?;
        }

        // train row reflects predictions made during the epoch (on the
        // augmented inputs the optimizer actually saw)
        let train_metrics = compute_metrics(&conf).map_err(Error::Core)?;
        let train_loss = loss_sum / train_set.len() as f64;
        history.push(HistoryRow::from_metrics(
            epoch,
            "train",
            train_loss,
            &train_metrics,
        ));

        if val_set.is_empty() {
            log(&format!(
                "epoch {epoch}: train loss {train_loss:.4} acc {:.3}",
                train_metrics.acc
            ));
            continue;
        }
        let (val_metrics, val_loss) = evaluate_model(&model, &val_set)?;
        history.push(HistoryRow::from_metrics(
            epoch,
            "val",
            val_loss,
            &val_metrics,
        ));
        log(&format!(
            "epoch {epoch}: train loss {train_loss:.4} acc {:.3} | val loss {val_loss:.4} acc {:.3}",
            train_metrics.acc, val_metrics.acc
        ));

        let improved = best
            .as_ref()
            .map(|(acc, _, _)| val_metrics.acc > *acc)
            .unwrap_or(true);
        if improved {
            let snapshot = model
                .store
                .entries()
                .iter()
                .map(|e| e.value.clone())
                .collect();
            best = Some((val_metrics.acc, epoch, snapshot));
        }
    }

    let (best_epoch, best_val_acc) = match best {
        Some((acc, epoch, snapshot)) => {
            for (i, value) in snapshot.into_iter().enumerate() {
                model.store.set_value(ParamId(i), value).map_err(Error::Core)?;
            }
            (epoch, acc)
        }
        None => (tp.epochs as u32, f64::NAN),
    };

    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_acc,
        history,
        warnings: split.warnings,
    })
}
