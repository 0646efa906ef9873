//! Load-side validators for every CSV the commands emit. Each one checks the
//! exact header and parses every field into typed rows.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
#[error("{file}: {msg}")]
pub struct SchemaError {
    pub file: String,
    pub msg: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub epoch: usize,
    /// Every metric column after `epoch`, in file order.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub mode: String,
    pub s: f64,
    pub seed: u64,
    pub final_test_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepMeanRow {
    pub mode: String,
    pub s: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub gain_vs_baseline: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityRow {
    pub mode: String,
    pub hyper: String,
    pub s: f64,
    pub gain_vs_reference: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultitaskRow {
    pub mode: String,
    pub per_task: Vec<f64>,
    pub f1_avg: f64,
    pub f1_task_std: f64,
}

struct Table {
    file: String,
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Table, SchemaError> {
        let file = path.display().to_string();
        let err = |msg: String| SchemaError { file: file.clone(), msg };
        let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
        let header = reader.headers().map_err(|e| err(e.to_string()))?.iter().map(String::from).collect();
        let rows = reader.records().collect::<Result<Vec<_>, _>>().map_err(|e| err(e.to_string()))?;
        Ok(Table { file, header, rows })
    }

    fn fail(&self, msg: impl Into<String>) -> SchemaError {
        SchemaError { file: self.file.clone(), msg: msg.into() }
    }

    fn expect_header(&self, expected: &[&str]) -> Result<(), SchemaError> {
        if self.header != expected {
            return Err(self.fail(format!("header {:?}, expected {:?}", self.header, expected)));
        }
        Ok(())
    }

    fn field<T: std::str::FromStr>(&self, row: usize, col: usize) -> Result<T, SchemaError> {
        let raw = &self.rows[row][col];
        raw.parse().map_err(|_| {
            self.fail(format!("row {}: column {} has unparseable value {raw:?}", row + 2, self.header[col]))
        })
    }

    fn text(&self, row: usize, col: usize) -> Result<String, SchemaError> {
        let raw = &self.rows[row][col];
        if raw.is_empty() {
            return Err(self.fail(format!("row {}: column {} is empty", row + 2, self.header[col])));
        }
        Ok(raw.to_string())
    }
}

/// `epoch,train_loss,val_loss,train_acc,val_acc,test_acc[,f1_t0..,f1_avg]`
pub fn read_run_csv(path: &Path) -> Result<Vec<RunRow>, SchemaError> {
    let t = Table::read(path)?;
    let base = ["epoch", "train_loss", "val_loss", "train_acc", "val_acc", "test_acc"];
    if t.header.len() < base.len() || t.header[..base.len()] != base {
        return Err(t.fail(format!("header {:?} does not start with {base:?}", t.header)));
    }
    let extra = &t.header[base.len()..];
    if !extra.is_empty() {
        let tasks = extra.len() - 1;
        let expected: Vec<String> = (0..tasks).map(|i| format!("f1_t{i}")).chain(["f1_avg".into()]).collect();
        if tasks == 0 || extra != expected {
            return Err(t.fail(format!("F1 columns {extra:?}, expected {expected:?}")));
        }
    }
    (0..t.rows.len())
        .map(|r| {
            let epoch = t.field(r, 0)?;
            if epoch != r + 1 {
                return Err(t.fail(format!("row {}: epoch {epoch} out of sequence", r + 2)));
            }
            let values = (1..t.header.len()).map(|c| t.field(r, c)).collect::<Result<_, _>>()?;
            Ok(RunRow { epoch, values })
        })
        .collect()
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>, SchemaError> {
    let t = Table::read(path)?;
    t.expect_header(&["mode", "s", "seed", "final_test_acc"])?;
    (0..t.rows.len())
        .map(|r| {
            Ok(SweepRow {
                mode: t.text(r, 0)?,
                s: t.field(r, 1)?,
                seed: t.field(r, 2)?,
                final_test_acc: t.field(r, 3)?,
            })
        })
        .collect()
}

pub fn read_sweep_mean_csv(path: &Path) -> Result<Vec<SweepMeanRow>, SchemaError> {
    let t = Table::read(path)?;
    t.expect_header(&["mode", "s", "mean_acc", "std_acc", "gain_vs_baseline"])?;
    (0..t.rows.len())
        .map(|r| {
            Ok(SweepMeanRow {
                mode: t.text(r, 0)?,
                s: t.field(r, 1)?,
                mean_acc: t.field(r, 2)?,
                std_acc: t.field(r, 3)?,
                gain_vs_baseline: t.field(r, 4)?,
            })
        })
        .collect()
}

pub fn read_stability_csv(path: &Path) -> Result<Vec<StabilityRow>, SchemaError> {
    let t = Table::read(path)?;
    t.expect_header(&["mode", "hyper", "s", "gain_vs_reference"])?;
    (0..t.rows.len())
        .map(|r| {
            Ok(StabilityRow {
                mode: t.text(r, 0)?,
                hyper: t.text(r, 1)?,
                s: t.field(r, 2)?,
                gain_vs_reference: t.field(r, 3)?,
            })
        })
        .collect()
}

/// `mode,f1_t0..f1_t{T-1},f1_avg,f1_task_std`
pub fn read_multitask_csv(path: &Path) -> Result<Vec<MultitaskRow>, SchemaError> {
    let t = Table::read(path)?;
    let n = t.header.len();
    if n < 4 {
        return Err(t.fail(format!("header {:?} has too few columns", t.header)));
    }
    let tasks = n - 3;
    let mut expected = vec!["mode".to_string()];
    expected.extend((0..tasks).map(|i| format!("f1_t{i}")));
    expected.extend(["f1_avg".to_string(), "f1_task_std".to_string()]);
    let expected: Vec<&str> = expected.iter().map(String::as_str).collect();
    t.expect_header(&expected)?;
    (0..t.rows.len())
        .map(|r| {
            Ok(MultitaskRow {
                mode: t.text(r, 0)?,
                per_task: (1..=tasks).map(|c| t.field(r, c)).collect::<Result<_, _>>()?,
                f1_avg: t.field(r, n - 2)?,
                f1_task_std: t.field(r, n - 1)?,
            })
        })
        .collect()
}
