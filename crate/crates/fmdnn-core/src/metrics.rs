//! Confusion matrices and macro-averaged classification metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// K x K count matrix, rows indexed by true class, columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    k: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Input(alloc::format!(
                "confusion matrix needs >= 2 classes, got {k}"
            )));
        }
        Ok(Confusion {
            k,
            counts: vec![0; k * k],
        })
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Dimension(alloc::format!(
                "confusion: {} counts for k = {k}",
                counts.len()
            )));
        }
        let mut c = Confusion::new(k)?;
        c.counts = counts;
        Ok(c)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(Error::Input(alloc::format!(
                "confusion: pair ({truth}, {pred}) out of range for {} classes",
                self.k
            )));
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Macro-averaged one-vs-rest metrics. `degenerate_classes` lists every
/// class where some denominator was zero and the convention "contributes 0"
/// was applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub confusion: Confusion,
    pub acc: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub ppv: f64,
    pub f1: f64,
    pub degenerate_classes: Vec<usize>,
}

pub fn compute_metrics(confusion: &Confusion) -> Result<Metrics> {
    let total = confusion.total();
    if total == 0 {
        return Err(Error::Input("metrics: empty confusion matrix".into()));
    }
    let k = confusion.classes();
    let totalf = total as f64;
    let mut trace = 0u64;
    let mut sums = (0.0, 0.0, 0.0, 0.0); // tpr, tnr, ppv, f1
    let mut degenerate = Vec::new();
    for class in 0..k {
        let tp = confusion.count(class, class);
        trace += tp;
        let row: u64 = (0..k).map(|j| confusion.count(class, j)).sum();
        let col: u64 = (0..k).map(|i| confusion.count(i, class)).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        let tn = total - tp - fn_ - fp;

        let mut flag = false;
        let mut ratio = |num: u64, den: u64| -> f64 {
            if den == 0 {
                flag = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let tpr = ratio(tp, tp + fn_);
        let tnr = ratio(tn, tn + fp);
        let ppv = ratio(tp, tp + fp);
        let f1 = if ppv + tpr == 0.0 {
            flag = true;
            0.0
        } else {
            2.0 * ppv * tpr / (ppv + tpr)
        };
        if flag {
            degenerate.push(class);
        }
        sums.0 += tpr;
        sums.1 += tnr;
        sums.2 += ppv;
        sums.3 += f1;
    }
    let kf = k as f64;
    Ok(Metrics {
        confusion: confusion.clone(),
        acc: trace as f64 / totalf,
        tpr: sums.0 / kf,
        tnr: sums.1 / kf,
        ppv: sums.2 / kf,
        f1: sums.3 / kf,
        degenerate_classes: degenerate,
    })
}
