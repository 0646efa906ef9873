//! Accuracy, per-task F1, per-run records and multi-seed aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = logits.matrix_dims()?;
    if n != labels.len() {
        return Err(Error::dim(format!("{n} logit rows but {} labels", labels.len())));
    }
    let hits = logits.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / n as f64)
}

/// A task is predicted present when its sigmoid exceeds 0.5, i.e. logit > 0.
pub fn predict_bits(logits: &Tensor) -> Vec<u8> {
    logits.data().iter().map(|&z| u8::from(z > 0.0)).collect()
}

/// Mean per-entry agreement between thresholded logits and task bits.
pub fn binary_accuracy(logits: &Tensor, bits: &[u8]) -> Result<f64> {
    if logits.numel() != bits.len() {
        return Err(Error::dim(format!("{} logits but {} labels", logits.numel(), bits.len())));
    }
    let hits = predict_bits(logits).iter().zip(bits).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / bits.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct F1Report {
    pub per_task: Vec<f64>,
    pub average: f64,
}

/// `2TP / (2TP + FP + FN)` per task (0 when the denominator is 0) and the
/// unweighted mean over tasks.
pub fn f1_per_task(logits: &Tensor, labels: &[u8], tasks: usize) -> Result<F1Report> {
    let (n, t) = logits.matrix_dims()?;
    if t != tasks || labels.len() != n * tasks {
        return Err(Error::dim(format!(
            "logits {:?} do not match {} labels over {tasks} tasks",
            logits.shape(),
            labels.len()
        )));
    }
    if labels.iter().any(|&b| b > 1) {
        return Err(Error::contract("task labels must be 0 or 1"));
    }
    let preds = predict_bits(logits);
    let mut counts = vec![(0usize, 0usize, 0usize); tasks];
    for (i, (&p, &y)) in preds.iter().zip(labels).enumerate() {
        let c = &mut counts[i % tasks];
        match (p, y) {
            (1, 1) => c.0 += 1,
            (1, 0) => c.1 += 1,
            (0, 1) => c.2 += 1,
            _ => {}
        }
    }
    let per_task: Vec<f64> = counts
        .iter()
        .map(|&(tp, fp, fn_)| {
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                (2 * tp) as f64 / denom as f64
            }
        })
        .collect();
    let average = per_task.iter().sum::<f64>() / tasks as f64;
    Ok(F1Report { per_task, average })
}

/// Metrics of one evaluation point. `f1` is present for multi-task runs.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub f1: Option<F1Report>,
}

impl EpochMetrics {
    /// Column names and values, in CSV order.
    pub fn named_values(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("train_loss".to_string(), self.train_loss),
            ("val_loss".to_string(), self.val_loss),
            ("train_acc".to_string(), self.train_acc),
            ("val_acc".to_string(), self.val_acc),
            ("test_acc".to_string(), self.test_acc),
        ];
        if let Some(f1) = &self.f1 {
            out.extend(f1.per_task.iter().enumerate().map(|(t, &v)| (format!("f1_t{t}"), v)));
            out.push(("f1_avg".to_string(), f1.average));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    /// 1-indexed.
    pub epoch: usize,
    pub metrics: EpochMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub fingerprint: String,
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    /// Metrics of the returned model: the best epoch under early stopping,
    /// otherwise the last one.
    pub final_metrics: Option<EpochMetrics>,
}

impl RunRecord {
    pub fn new(fingerprint: impl Into<String>, seed: u64) -> Self {
        RunRecord { fingerprint: fingerprint.into(), seed, rows: Vec::new(), final_metrics: None }
    }

    pub fn final_or_last(&self) -> Option<&EpochMetrics> {
        self.final_metrics.as_ref().or_else(|| self.rows.last().map(|r| &r.metrics))
    }

    /// CSV with one row per completed epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header = vec!["epoch".to_string()];
        if let Some(first) = self.rows.first() {
            header.extend(first.metrics.named_values().into_iter().map(|(n, _)| n));
        } else {
            header.extend(["train_loss", "val_loss", "train_acc", "val_acc", "test_acc"].map(String::from));
        }
        out.push_str(&header.join(","));
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{}", row.epoch);
            for (_, v) in row.metrics.named_values() {
                out.push(',');
                out.push_str(&format_g6(v));
            }
            out.push('\n');
        }
        out
    }
}

/// Formats like C's `%.6g`: six significant digits, trailing zeros dropped,
/// exponent notation outside `[1e-4, 1e6)`.
pub fn format_g6(v: f64) -> String {
    const PRECISION: i32 = 6;
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..PRECISION).contains(&exp) {
        let decimals = (PRECISION - 1 - exp) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub count: usize,
}

/// Mean and sample standard deviation. Values are sorted first so the result
/// does not depend on input order.
pub fn mean_std(values: &[f64]) -> Stats {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return Stats { mean: f64::NAN, std: f64::NAN, count: 0 };
    }
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean).powi(2)).collect();
        dev.sort_by(f64::total_cmp);
        (dev.iter().sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Stats { mean, std, count: n }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub fingerprint: String,
    pub runs: usize,
    /// Per epoch, statistics over the runs that reached it.
    pub per_epoch: BTreeMap<usize, BTreeMap<String, Stats>>,
    pub final_metrics: BTreeMap<String, Stats>,
}

/// Mean and sample standard deviation of every metric across seeds.
pub fn aggregate_runs(records: &[RunRecord]) -> Result<Aggregate> {
    let Some(first) = records.first() else {
        return Err(Error::contract("cannot aggregate zero runs"));
    };
    if let Some(other) = records.iter().find(|r| r.fingerprint != first.fingerprint) {
        return Err(Error::contract(format!(
            "config fingerprints differ: {} vs {}",
            first.fingerprint, other.fingerprint
        )));
    }
    let collect = |items: &mut dyn Iterator<Item = &EpochMetrics>| {
        let mut by_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for m in items {
            for (name, v) in m.named_values() {
                by_name.entry(name).or_default().push(v);
            }
        }
        by_name.into_iter().map(|(k, v)| (k, mean_std(&v))).collect::<BTreeMap<_, _>>()
    };
    let mut epochs: BTreeMap<usize, Vec<&EpochMetrics>> = BTreeMap::new();
    for r in records {
        for row in &r.rows {
            epochs.entry(row.epoch).or_default().push(&row.metrics);
        }
    }
    let per_epoch = epochs.into_iter().map(|(e, ms)| (e, collect(&mut ms.into_iter()))).collect();
    let final_metrics = collect(&mut records.iter().filter_map(RunRecord::final_or_last));
    Ok(Aggregate { fingerprint: first.fingerprint.clone(), runs: records.len(), per_epoch, final_metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_ties_go_to_index_zero() {
        let logits = Tensor::zeros(vec![4, 10]);
        assert_eq!(accuracy(&logits, &[0, 0, 3, 9]).unwrap(), 0.5);
        let perfect = Tensor::from_rows(&[[0.0, 1.0], [2.0, 1.0]]).unwrap();
        assert_eq!(accuracy(&perfect, &[1, 0]).unwrap(), 1.0);
        assert!(accuracy(&perfect, &[1]).is_err());
    }

    #[test]
    fn f1_formula() {
        // task 0: TP=2, FP=1, FN=1
        let logits = Tensor::new(vec![5, 1], vec![1.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
        let r = f1_per_task(&logits, &[1, 1, 0, 1, 0], 1).unwrap();
        assert!((r.per_task[0] - 4.0 / 6.0).abs() < 1e-15);

        let none = Tensor::new(vec![2, 2], vec![-1.0; 4]).unwrap();
        let r = f1_per_task(&none, &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(r.per_task, vec![0.0, 0.0]);

        let perfect = Tensor::new(vec![2, 2], vec![3.0, -3.0, -3.0, 3.0]).unwrap();
        let r = f1_per_task(&perfect, &[1, 0, 0, 1], 2).unwrap();
        assert_eq!(r.per_task, vec![1.0, 1.0]);
        assert_eq!(r.average, 1.0);
    }

    #[test]
    fn g6_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.5, "0.5"),
            (2.0 / 3.0, "0.666667"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (999999.5, "1e+06"),
            (std::f64::consts::LN_10, "2.30259"),
        ];
        for (v, s) in cases {
            assert_eq!(format_g6(v), s, "{v}");
        }
    }

    fn record(seed: u64, acc: f64) -> RunRecord {
        let m = EpochMetrics { train_loss: 1.0, val_loss: 1.0, train_acc: acc, val_acc: acc, test_acc: acc, f1: None };
        RunRecord { fingerprint: "fp".into(), seed, rows: vec![EpochRow { epoch: 1, metrics: m }], final_metrics: None }
    }

    #[test]
    fn two_point_aggregate() {
        let agg = aggregate_runs(&[record(1, 0.8), record(2, 0.9)]).unwrap();
        let s = agg.final_metrics["test_acc"];
        assert!((s.mean - 0.85).abs() < 1e-12);
        assert!((s.std - 0.0707107).abs() < 1e-6);

        let single = aggregate_runs(&[record(1, 0.8)]).unwrap();
        assert_eq!(single.final_metrics["test_acc"].mean, 0.8);
        assert_eq!(single.final_metrics["test_acc"].std, 0.0);

        let mut other = record(3, 0.7);
        other.fingerprint = "zz".into();
        assert!(aggregate_runs(&[record(1, 0.8), other]).is_err());
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let csv = record(1, 0.5).to_csv();
        assert_eq!(csv, "epoch,train_loss,val_loss,train_acc,val_acc,test_acc\n1,1,1,0.5,0.5,0.5\n");
    }
}
