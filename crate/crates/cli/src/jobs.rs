//! Data preparation and execution of independent (mode, hyper, s, seed) jobs.

use qreg_core::data::{inject_noise, load_csv, split, synth_blobs, CsvOptions, Dataset, Labels, NoiseSpec, TaskModel};
use qreg_core::nn::{build_model, Head, ModelSpec};
use qreg_core::train::{derive_seed, train, Regularizer, TrainConfig, TrainError, TrainOutcome};
use qreg_core::Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{hex16, DataSource, ExperimentConfig, Hyper, ModeName};
use crate::error::CliError;

const STREAM_INIT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_POOL: u64 = 5;
const STREAM_TEST: u64 = 6;

/// Training pool (split into train/val per run) and the fixed test set.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub pool: Dataset,
    pub test: Dataset,
}

impl PreparedData {
    pub fn head(&self) -> Head {
        match self.pool.labels() {
            Labels::Classes { classes, .. } => Head::Softmax { classes: *classes },
            Labels::Tasks { tasks, .. } => Head::Sigmoid { tasks: *tasks },
        }
    }

    pub fn is_multitask(&self) -> bool {
        self.pool.is_multitask()
    }
}

fn reshape(ds: Dataset, shape: &Option<Vec<usize>>) -> Result<Dataset, CliError> {
    let Some(shape) = shape else { return Ok(ds) };
    let mut full = vec![ds.len()];
    full.extend(shape);
    let features = ds.features().clone().reshape(full)?;
    Ok(Dataset::new(ds.name.clone(), features, ds.labels().clone())?)
}

/// Builds or loads the datasets. Synthetic data depends only on the data
/// seed, so every run and mode sees the same pool and test set.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, CliError> {
    let seed = cfg.data.seed;
    let (pool, test) = match &cfg.data.source {
        DataSource::Blobs { classes, per_class, test_per_class, dim, separation } => (
            synth_blobs(*classes, *per_class, *dim, *separation, derive_seed(seed, STREAM_POOL))?,
            synth_blobs(*classes, *test_per_class, *dim, *separation, derive_seed(seed, STREAM_TEST))?,
        ),
        DataSource::Multitask { tasks, train_size, test_size, dim } => {
            let model = TaskModel::new(*tasks, *dim, seed)?;
            (
                model.sample(*train_size, derive_seed(seed, STREAM_POOL))?,
                model.sample(*test_size, derive_seed(seed, STREAM_TEST))?,
            )
        }
        DataSource::Csv { train_path, test_path, multitask, classes, image_shape } => {
            let opts = CsvOptions { multitask: *multitask, classes: *classes };
            let pool = load_csv(train_path, opts)?;
            // both files must agree on the class count
            let test_opts = match pool.labels() {
                Labels::Classes { classes, .. } => CsvOptions { classes: Some(*classes), ..opts },
                Labels::Tasks { .. } => opts,
            };
            let test = load_csv(test_path, test_opts)?;
            (reshape(pool, image_shape)?, reshape(test, image_shape)?)
        }
    };
    Ok(PreparedData { pool, test })
}

/// One training run of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Job {
    pub mode: ModeName,
    pub hyper: Option<Hyper>,
    pub s: f64,
    pub seed: u64,
}

impl Job {
    pub fn describe(&self) -> String {
        let hyper = self.hyper.map(|h| format!(" {}", h.label())).unwrap_or_default();
        format!("{}{hyper} s={} seed={}", self.mode, self.s, self.seed)
    }

    /// Fingerprint shared by all seeds of the same (mode, hyper, s) cell.
    pub fn fingerprint(&self, config_fingerprint: &str) -> String {
        let hyper = self.hyper.map(|h| h.label()).unwrap_or_default();
        let digest = Sha256::digest(format!("{config_fingerprint}|{}|{hyper}|{:?}", self.mode, self.s));
        hex16(&digest)
    }
}

/// Every combination in mode-major, then hyper, then s, then seed order.
pub fn cross_product(modes: &[ModeName], hypers: &[Option<Hyper>], levels: &[f64], seeds: &[u64]) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &mode in modes {
        for &hyper in hypers {
            for &s in levels {
                for &seed in seeds {
                    jobs.push(Job { mode, hyper, s, seed });
                }
            }
        }
    }
    jobs
}

fn setup_failure(error: qreg_core::Error, fingerprint: &str, seed: u64) -> TrainError {
    TrainError { error, record: Box::new(qreg_core::metrics::RunRecord::new(fingerprint, seed)) }
}

/// Splits, corrupts, initializes and trains one job. Split, noise and
/// initialization depend on the run seed only, so modes at the same seed
/// share data and initial weights.
pub fn run_job(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    job: &Job,
    fingerprint: &str,
    early_stop_all: bool,
) -> Result<TrainOutcome, TrainError> {
    let cfg = match job.hyper {
        Some(h) => cfg.with_hyper(job.mode, h),
        None => cfg.clone(),
    };
    let seed = job.seed;
    let setup = || -> qreg_core::Result<_> {
        let (train_ds, val_ds) = split(&data.pool, cfg.data.val_fraction, derive_seed(seed, STREAM_SPLIT))?;
        let spec = NoiseSpec {
            fraction: job.s,
            seed: derive_seed(seed, STREAM_NOISE),
            exclude_original: cfg.exclude_original,
        };
        let (noisy, _) = inject_noise(&train_ds, &spec)?;
        let mut model_spec = ModelSpec::new(cfg.model.preset, data.pool.example_shape().to_vec(), data.head());
        model_spec.hidden = cfg.model.hidden.clone();
        model_spec.batchnorm = cfg.model.batchnorm;
        let model = build_model(&model_spec, &mut Rng::seed_from_u64(derive_seed(seed, STREAM_INIT)))?;
        Ok((noisy, val_ds, model))
    };
    let (train_ds, val_ds, model) = setup().map_err(|e| setup_failure(e, fingerprint, seed))?;

    let mut regularizers = vec![cfg.regularizer(job.mode)];
    if early_stop_all && job.mode != ModeName::EarlyStopping {
        regularizers.push(cfg.regularizer(ModeName::EarlyStopping));
    }
    let config = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        adam: cfg.adam,
        seed: derive_seed(seed, STREAM_TRAIN),
        combine: regularizers.iter().filter(|r| !matches!(r, Regularizer::None)).count() > 1,
        regularizers,
        eval_batch: cfg.eval_batch,
        fingerprint: fingerprint.to_string(),
    };
    // records carry the run seed, not the derived shuffling seed
    match train(model, &train_ds, &val_ds, &data.test, &config, &mut ()) {
        Ok(mut outcome) => {
            outcome.record.seed = seed;
            Ok(outcome)
        }
        Err(mut e) => {
            e.record.seed = seed;
            Err(e)
        }
    }
}

/// Worker pool sized by `QREG_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("QREG_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| CliError::Config(format!("QREG_THREADS = {v:?} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))
}

/// Runs `f` over `jobs` in parallel and returns results in job order.
pub fn run_parallel<T: Send>(pool: &rayon::ThreadPool, jobs: &[Job], f: impl Fn(&Job) -> T + Sync + Send) -> Vec<T> {
    pool.install(|| jobs.par_iter().map(f).collect())
}
