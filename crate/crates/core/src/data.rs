//! Datasets, synthetic generators, label-noise injection and splitting.
//!
//! Every randomized function here is a pure function of its seed.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng as _, SeedableRng};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::checkpoint::{read_records, write_records, DATASET_MAGIC};
use crate::error::{Error, Result};
use crate::nn::normal;
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// Class ids in `[0, classes)`.
    Classes { ids: Vec<usize>, classes: usize },
    /// Row-major `[N × tasks]` presence bits.
    Tasks { bits: Vec<u8>, tasks: usize },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { ids, .. } => ids.len(),
            Labels::Tasks { bits, tasks } => bits.len() / tasks,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of classes (single-task) or tasks (multi-task).
    pub fn width(&self) -> usize {
        match self {
            Labels::Classes { classes, .. } => *classes,
            Labels::Tasks { tasks, .. } => *tasks,
        }
    }

    fn subset(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Classes { ids, classes } => {
                Labels::Classes { ids: indices.iter().map(|&i| ids[i]).collect(), classes: *classes }
            }
            Labels::Tasks { bits, tasks } => Labels::Tasks {
                bits: indices.iter().flat_map(|&i| bits[i * tasks..(i + 1) * tasks].iter().copied()).collect(),
                tasks: *tasks,
            },
        }
    }

    /// Hard targets for the listed examples: one-hot rows or task bits.
    pub fn targets(&self, indices: &[usize]) -> Tensor {
        let w = self.width();
        let mut data = vec![0.0; indices.len() * w];
        for (r, &i) in indices.iter().enumerate() {
            match self {
                Labels::Classes { ids, .. } => data[r * w + ids[i]] = 1.0,
                Labels::Tasks { bits, .. } => {
                    for t in 0..w {
                        data[r * w + t] = f64::from(bits[i * w + t]);
                    }
                }
            }
        }
        Tensor::new(vec![indices.len(), w], data).expect("target shape")
    }

    pub fn all_targets(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.targets(&idx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    features: Tensor,
    labels: Labels,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Tensor, labels: Labels) -> Result<Self> {
        let n = features.rows();
        if features.rank() < 2 {
            return Err(Error::dim(format!("features need a batch axis, got {:?}", features.shape())));
        }
        if labels.len() != n {
            return Err(Error::Data(format!("{n} feature rows but {} labels", labels.len())));
        }
        if !features.is_finite() {
            return Err(Error::Data("features contain NaN or infinity".into()));
        }
        match &labels {
            Labels::Classes { ids, classes } => {
                if *classes < 2 {
                    return Err(Error::Data(format!("need at least 2 classes, got {classes}")));
                }
                if let Some(bad) = ids.iter().find(|&&l| l >= *classes) {
                    return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
                }
            }
            Labels::Tasks { bits, tasks } => {
                if *tasks == 0 || bits.len() % tasks != 0 {
                    return Err(Error::Data("task bit matrix is ragged".into()));
                }
                if bits.iter().any(|&b| b > 1) {
                    return Err(Error::Data("task labels must be 0 or 1".into()));
                }
            }
        }
        Ok(Dataset { name: name.into(), features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn is_multitask(&self) -> bool {
        matches!(self.labels, Labels::Tasks { .. })
    }

    /// Per-example feature shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.select_rows(indices),
            labels: self.labels.subset(indices),
        }
    }

    /// Features of the listed examples, stacked along a new batch axis.
    pub fn batch_features(&self, indices: &[usize]) -> Tensor {
        self.features.select_rows(indices)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    /// Fraction of training examples re-annotated.
    pub fraction: f64,
    pub seed: u64,
    /// Draw the new label from the other classes only.
    pub exclude_original: bool,
}

impl NoiseSpec {
    pub fn new(fraction: f64, seed: u64) -> Self {
        NoiseSpec { fraction, seed, exclude_original: false }
    }

    /// `round(s·N)`
    pub fn count(&self, n: usize) -> usize {
        (self.fraction * n as f64).round() as usize
    }
}

/// Re-annotates exactly `round(s·N)` examples chosen uniformly without
/// replacement. Single-task labels are redrawn uniformly over all classes
/// (so a redraw may land on the original); multi-task examples get every
/// bit redrawn as a fair coin. Returns the noisy copy and the sorted
/// selected indices.
pub fn inject_noise(ds: &Dataset, spec: &NoiseSpec) -> Result<(Dataset, Vec<usize>)> {
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(Error::contract(format!("noise fraction {} outside [0, 1]", spec.fraction)));
    }
    let n = ds.len();
    let k = spec.count(n);
    let mut rng = Rng::seed_from_u64(spec.seed);
    let mut selected = sample(&mut rng, n, k).into_vec();
    selected.sort_unstable();

    let mut labels = ds.labels.clone();
    match &mut labels {
        Labels::Classes { ids, classes } => {
            for &i in &selected {
                ids[i] = if spec.exclude_original {
                    let draw = rng.random_range(0..*classes - 1);
                    if draw >= ids[i] {
                        draw + 1
                    } else {
                        draw
                    }
                } else {
                    rng.random_range(0..*classes)
                };
            }
        }
        Labels::Tasks { bits, tasks } => {
            for &i in &selected {
                for b in &mut bits[i * *tasks..(i + 1) * *tasks] {
                    *b = u8::from(rng.random::<bool>());
                }
            }
        }
    }
    let noisy = Dataset { name: ds.name.clone(), features: ds.features.clone(), labels };
    Ok((noisy, selected))
}

/// Seeded partition into `(train, val)` index sets, each sorted ascending;
/// `|val| = round(val_fraction·N)`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::contract(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let n_val = (val_fraction * n as f64).round() as usize;
    let mut rng = Rng::seed_from_u64(seed);
    let mut val = sample(&mut rng, n, n_val).into_vec();
    val.sort_unstable();
    let train = (0..n).filter(|i| val.binary_search(i).is_err()).collect();
    Ok((train, val))
}

pub fn split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(ds.len(), val_fraction, seed)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract(format!("splitting {} examples at {val_fraction} leaves an empty side", ds.len())));
    }
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Vertices of a regular simplex with the given edge length, one per class,
/// embedded in `dim` coordinates (exact when `dim ≥ classes − 1`, otherwise
/// truncated to the first `dim` coordinates).
pub fn simplex_means(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    // Helmert rows h_j, j = 1..C-1, are an orthonormal basis of the subspace
    // orthogonal to the all-ones vector; basis vectors e_c sit √2 apart.
    let scale = separation / 2f64.sqrt();
    (0..classes)
        .map(|c| {
            let mut v = vec![0.0; dim];
            for j in 1..classes.min(dim + 1) {
                let norm = ((j * (j + 1)) as f64).sqrt();
                let h = if c < j {
                    1.0 / norm
                } else if c == j {
                    -(j as f64) / norm
                } else {
                    0.0
                };
                v[j - 1] = scale * h;
            }
            v
        })
        .collect()
}

/// Unit-variance Gaussian clusters around simplex vertices `separation` apart.
pub fn synth_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim < 2 || per_class == 0 {
        return Err(Error::contract(format!(
            "blobs need C >= 2, D >= 2 and a positive class size (C={classes}, D={dim}, per_class={per_class})"
        )));
    }
    let means = simplex_means(classes, dim, separation);
    let mut rng = Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut ids = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            features.extend(mean.iter().map(|m| m + normal(&mut rng)));
            ids.push(c);
        }
    }
    Dataset::new("blobs", Tensor::new(vec![n, dim], features)?, Labels::Classes { ids, classes })
}

/// Ground truth of the synthetic multi-task problem: task `t` is present
/// when `⟨w_t, x⟩` exceeds a threshold placed so the positive rate equals the
/// task's prior.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub hyperplanes: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
    pub priors: Vec<f64>,
}

pub const TASK_PRIOR_RANGE: (f64, f64) = (0.15, 0.5);

impl TaskModel {
    pub fn new(tasks: usize, dim: usize, seed: u64) -> Result<Self> {
        if tasks < 2 || dim == 0 {
            return Err(Error::contract(format!("multi-task data needs T >= 2 and D >= 1 (T={tasks}, D={dim})")));
        }
        let mut rng = Rng::seed_from_u64(seed);
        let std_normal = Normal::standard();
        let (lo, hi) = TASK_PRIOR_RANGE;
        let mut hyperplanes = Vec::with_capacity(tasks);
        let mut thresholds = Vec::with_capacity(tasks);
        let mut priors = Vec::with_capacity(tasks);
        for _ in 0..tasks {
            let prior = rng.random_range(lo..=hi);
            let w: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            thresholds.push(norm * std_normal.inverse_cdf(1.0 - prior));
            hyperplanes.push(w);
            priors.push(prior);
        }
        Ok(TaskModel { hyperplanes, thresholds, priors })
    }

    pub fn tasks(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.hyperplanes[0].len()
    }

    pub fn label(&self, x: &[f64]) -> Vec<u8> {
        self.hyperplanes
            .iter()
            .zip(&self.thresholds)
            .map(|(w, &tau)| u8::from(w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() > tau))
            .collect()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = Rng::seed_from_u64(seed);
        let d = self.dim();
        let features: Vec<f64> = (0..n * d).map(|_| normal(&mut rng)).collect();
        let bits = features.chunks(d).flat_map(|x| self.label(x)).collect();
        Dataset::new("multitask", Tensor::new(vec![n, d], features)?, Labels::Tasks { bits, tasks: self.tasks() })
    }
}

/// Gaussian features with linear-threshold task labels; returns the data and
/// the per-task priors.
pub fn synth_multitask(tasks: usize, n: usize, dim: usize, seed: u64) -> Result<(Dataset, Vec<f64>)> {
    let model = TaskModel::new(tasks, dim, seed)?;
    let ds = model.sample(n, seed ^ 0x5eed_da7a)?;
    Ok((ds, model.priors))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CsvOptions {
    /// Leading `y0..y{T-1}` columns instead of a single `label` column.
    pub multitask: bool,
    /// Number of classes; inferred as `max label + 1` (at least 2) when absent.
    pub classes: Option<usize>,
}

/// Reads `label,f0,…` (or `y0,…,y{T-1},f0,…`) rows.
pub fn load_csv(path: impl AsRef<Path>, opts: CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader =
        csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(BufReader::new(File::open(path)?));
    let header = reader.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    let label_cols = if opts.multitask { header.iter().take_while(|h| h.starts_with('y')).count() } else { 1 };
    for (i, h) in header.iter().enumerate() {
        let expected = if !opts.multitask && i == 0 {
            "label".to_string()
        } else if i < label_cols {
            format!("y{i}")
        } else {
            format!("f{}", i - label_cols)
        };
        if h.trim() != expected {
            return Err(Error::Parse { line: 1, msg: format!("column {i} is {h:?}, expected {expected:?}") });
        }
    }
    let dim = header.len() - label_cols;
    if dim == 0 || label_cols == 0 {
        return Err(Error::Parse { line: 1, msg: "header declares no label or feature columns".into() });
    }

    let mut features = Vec::new();
    let mut raw_labels: Vec<u64> = Vec::new();
    for record in reader.records() {
        let record = record
            .map_err(|e| Error::Parse { line: e.position().map(|p| p.line()).unwrap_or(0), msg: e.to_string() })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        for (i, field) in record.iter().enumerate() {
            let field = field.trim();
            if i < label_cols {
                let v: u64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("label {field:?} is not a non-negative integer"),
                })?;
                raw_labels.push(v);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Parse { line, msg: format!("feature {field:?} is not a number") })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line, msg: format!("feature {field:?} is not finite") });
                }
                features.push(v);
            }
        }
    }
    let n = raw_labels.len() / label_cols;
    if n == 0 {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    let labels = if opts.multitask {
        if let Some(bad) = raw_labels.iter().find(|&&b| b > 1) {
            return Err(Error::Data(format!("task label {bad} is not 0 or 1")));
        }
        Labels::Tasks { bits: raw_labels.iter().map(|&b| b as u8).collect(), tasks: label_cols }
    } else {
        let max = raw_labels.iter().copied().max().unwrap_or(0) as usize;
        let classes = opts.classes.unwrap_or((max + 1).max(2));
        if max >= classes {
            return Err(Error::Data(format!("label {max} outside [0, {classes})")));
        }
        Labels::Classes { ids: raw_labels.iter().map(|&l| l as usize).collect(), classes }
    };
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, Tensor::new(vec![n, dim], features)?, labels)
}

/// Writes the format [`load_csv`] reads; features are flattened per example.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    let dim: usize = ds.example_shape().iter().product();
    let mut header: Vec<String> = match ds.labels() {
        Labels::Classes { .. } => vec!["label".into()],
        Labels::Tasks { tasks, .. } => (0..*tasks).map(|t| format!("y{t}")).collect(),
    };
    header.extend((0..dim).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = match ds.labels() {
            Labels::Classes { ids, .. } => vec![ids[i].to_string()],
            Labels::Tasks { bits, tasks } => bits[i * tasks..(i + 1) * tasks].iter().map(u8::to_string).collect(),
        };
        row.extend(ds.features().row(i).iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Caches a dataset in the binary tensor container under the `QDAT1` magic.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let (kind, width, labels) = match ds.labels() {
        Labels::Classes { ids, classes } => (0.0, *classes, ids.iter().map(|&l| l as f64).collect::<Vec<_>>()),
        Labels::Tasks { bits, tasks } => (1.0, *tasks, bits.iter().map(|&b| f64::from(b)).collect()),
    };
    let records = vec![
        ("meta".to_string(), Tensor::vector(vec![kind, width as f64])),
        ("features".to_string(), ds.features().clone()),
        ("labels".to_string(), Tensor::vector(labels)),
    ];
    write_records(BufWriter::new(File::create(path)?), DATASET_MAGIC, &records)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let records = read_records(BufReader::new(File::open(path)?), DATASET_MAGIC)?;
    let get = |name: &str| {
        records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Data(format!("dataset cache is missing {name}")))
    };
    let meta = get("meta")?;
    let features = get("features")?;
    let raw = get("labels")?.into_data();
    let width = meta.data().get(1).copied().unwrap_or(0.0) as usize;
    let labels = if meta.data()[0] == 0.0 {
        Labels::Classes { ids: raw.iter().map(|&v| v as usize).collect(), classes: width }
    } else {
        Labels::Tasks { bits: raw.iter().map(|&v| v as u8).collect(), tasks: width }
    };
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, classes: usize) -> Dataset {
        let features = Tensor::new(vec![n, 2], (0..2 * n).map(|v| v as f64).collect()).unwrap();
        Dataset::new("toy", features, Labels::Classes { ids: (0..n).map(|i| i % classes).collect(), classes }).unwrap()
    }

    #[test]
    fn zero_noise_is_a_no_op() {
        let ds = toy(50, 5);
        let (noisy, idx) = inject_noise(&ds, &NoiseSpec::new(0.0, 1)).unwrap();
        assert_eq!(noisy, ds);
        assert!(idx.is_empty());
    }

    #[test]
    fn noise_count_and_determinism() {
        let ds = toy(10, 3);
        let (a, ia) = inject_noise(&ds, &NoiseSpec::new(0.2, 42)).unwrap();
        let (b, ib) = inject_noise(&ds, &NoiseSpec::new(0.2, 42)).unwrap();
        assert_eq!(ia.len(), 2);
        assert_eq!(ia, ib);
        assert_eq!(a, b);
    }

    #[test]
    fn excluding_the_original_always_changes_the_label() {
        let ds = toy(1000, 4);
        let spec = NoiseSpec { fraction: 0.5, seed: 3, exclude_original: true };
        let (noisy, idx) = inject_noise(&ds, &spec).unwrap();
        let (Labels::Classes { ids: before, .. }, Labels::Classes { ids: after, .. }) = (ds.labels(), noisy.labels())
        else {
            unreachable!()
        };
        for &i in &idx {
            assert_ne!(before[i], after[i]);
        }
    }

    #[test]
    fn split_partitions_the_indices() {
        let (train, val) = split_indices(100, 0.1, 9).unwrap();
        assert_eq!((train.len(), val.len()), (90, 10));
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.1, 9).unwrap(), (train, val));
        assert!(split_indices(100, 0.0, 9).is_err());
        assert!(split_indices(100, 1.0, 9).is_err());
    }

    #[test]
    fn simplex_vertices_are_equidistant() {
        let means = simplex_means(10, 32, 4.5);
        for a in 0..10 {
            for b in a + 1..10 {
                let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!((d - 4.5).abs() < 1e-12, "{a} {b} {d}");
            }
        }
    }

    #[test]
    fn blobs_are_deterministic() {
        assert_eq!(synth_blobs(3, 20, 4, 2.0, 5).unwrap(), synth_blobs(3, 20, 4, 2.0, 5).unwrap());
        assert_ne!(synth_blobs(3, 20, 4, 2.0, 5).unwrap(), synth_blobs(3, 20, 4, 2.0, 6).unwrap());
        assert!(synth_blobs(1, 20, 4, 2.0, 5).is_err());
    }

    #[test]
    fn multitask_labels_are_reproducible() {
        let (a, pa) = synth_multitask(4, 100, 8, 1).unwrap();
        let (b, pb) = synth_multitask(4, 100, 8, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(pa.iter().all(|p| (0.15..=0.5).contains(p)));
        assert!(synth_multitask(1, 100, 8, 1).is_err());
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let f = Tensor::zeros(vec![2, 2]);
        assert!(Dataset::new("x", f.clone(), Labels::Classes { ids: vec![0, 3], classes: 3 }).is_err());
        assert!(Dataset::new("x", f.clone(), Labels::Tasks { bits: vec![0, 2, 1, 1], tasks: 2 }).is_err());
        assert!(Dataset::new("x", f, Labels::Classes { ids: vec![0], classes: 3 }).is_err());
    }
}
