//! Baseline overfitting countermeasures: L2 weight decay, label smoothing and
//! early stopping. Dropout lives with the layers
//! ([`crate::nn::dropout_forward`]).

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `α · Σ_l ‖W_l‖²` over the given weight leaves.
pub fn weight_decay_loss(g: &mut Graph, weights: &[Var], alpha: f64) -> Result<Var> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::contract(format!("weight decay {alpha} must be non-negative")));
    }
    let mut total: Option<Var> = None;
    for &w in weights {
        let sq = g.mul(w, w)?;
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(g.scale(total, alpha))
}

fn check_smoothing(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::contract(format!("label smoothing {alpha} outside [0, 1)")))
    }
}

/// `(1 − α)·y + α/C` applied entry-wise to one-hot rows (`y` is `[N × C]`).
pub fn smooth_labels(y: &Tensor, alpha: f64, classes: usize) -> Result<Tensor> {
    check_smoothing(alpha)?;
    let (_, c) = y.matrix_dims()?;
    if c != classes {
        return Err(Error::dim(format!("labels have {c} columns, expected {classes} classes")));
    }
    for i in 0..y.rows() {
        let row = y.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract(format!("label row {i} is not one-hot")));
        }
    }
    Ok(y.map(|v| smoothed(v, alpha, classes as f64)))
}

/// Label-wise smoothing for multi-task binary labels, `C = 2` per label:
/// `1 → 1 − α/2`, `0 → α/2`.
pub fn smooth_binary_labels(y: &Tensor, alpha: f64) -> Result<Tensor> {
    check_smoothing(alpha)?;
    if let Some(bad) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!("binary label {bad} is not 0 or 1")));
    }
    Ok(y.map(|v| smoothed(v, alpha, 2.0)))
}

/// `(1 − α)·y + α/C` for `y ∈ {0, 1}`. The hot value is written as
/// `1 − α(C−1)/C`, which rounds to the nearest double of the exact result
/// in cases where the literal form is off by one ulp.
fn smoothed(y: f64, alpha: f64, classes: f64) -> f64 {
    if y == 1.0 {
        1.0 - alpha * (classes - 1.0) / classes
    } else {
        alpha / classes
    }
}

/// Validation metric tracked by early stopping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopMetric {
    ValLoss,
    ValAccuracy,
}

impl StopMetric {
    fn improves(self, candidate: f64, best: f64) -> bool {
        match self {
            StopMetric::ValLoss => candidate < best,
            StopMetric::ValAccuracy => candidate > best,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StopMetric::ValLoss => "val_loss",
            StopMetric::ValAccuracy => "val_accuracy",
        }
    }
}

impl fmt::Display for StopMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StopMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val_loss" => Ok(StopMetric::ValLoss),
            "val_accuracy" => Ok(StopMetric::ValAccuracy),
            other => Err(Error::contract(format!("unknown early-stop metric {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub metric: StopMetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience-based early stopping. Epochs are 1-indexed.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    config: EarlyStopConfig,
    best: Option<f64>,
    best_epoch: usize,
    epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(config: EarlyStopConfig) -> Self {
        EarlyStopping { config, best: None, best_epoch: 0, epoch: 0, stale: 0 }
    }

    /// Feeds one epoch's metric. Stops once `patience` consecutive epochs
    /// failed to strictly improve on the best value.
    pub fn step(&mut self, metric: f64) -> Result<StopDecision> {
        if !metric.is_finite() {
            return Err(Error::contract(format!("early-stop metric must be finite, got {metric}")));
        }
        self.epoch += 1;
        let improved = self.best.is_none_or(|b| self.config.metric.improves(metric, b));
        if improved {
            self.best = Some(metric);
            self.best_epoch = self.epoch;
            self.stale = 0;
            return Ok(StopDecision::Continue);
        }
        self.stale += 1;
        if self.stale >= self.config.patience {
            Ok(StopDecision::Stop)
        } else {
            Ok(StopDecision::Continue)
        }
    }

    /// Did the most recent step set a new best?
    pub fn improved_last(&self) -> bool {
        self.epoch > 0 && self.best_epoch == self.epoch
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}
