//! The four experiment commands. Jobs run in parallel; every output file is
//! written once, in job order, after all jobs finish.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qreg_core::checkpoint::save_model;
use qreg_core::metrics::{format_g6, mean_std, EpochMetrics, RunRecord};
use qreg_core::train::{TrainError, TrainOutcome};

use crate::config::{DataSource, ExperimentConfig, Hyper, ModeName};
use crate::error::CliError;
use crate::jobs::{cross_product, prepare_data, run_job, run_parallel, thread_pool, Job, PreparedData};

/// Settings shared by every command.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub quiet: bool,
}

type JobResult = Result<TrainOutcome, TrainError>;

/// Modes run by `multitask` when the config lists none.
pub const MULTITASK_MODES: [ModeName; 6] = [
    ModeName::None,
    ModeName::WeightDecay,
    ModeName::Dropout,
    ModeName::LabelSmoothing,
    ModeName::Pruning,
    ModeName::Quantization,
];

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn final_metrics(record: &RunRecord) -> Option<&EpochMetrics> {
    record.final_or_last()
}

/// Runs jobs, reporting completions on stderr unless quiet.
fn execute(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    jobs: &[Job],
    fingerprint: &str,
    early_stop_all: bool,
    opts: &RunOptions,
) -> Result<Vec<JobResult>, CliError> {
    let pool = thread_pool()?;
    let total = jobs.len();
    Ok(run_parallel(&pool, jobs, |job| {
        let result = run_job(cfg, data, job, &job.fingerprint(fingerprint), early_stop_all);
        if !opts.quiet {
            match &result {
                Ok(o) => {
                    let acc = o.record.final_or_last().map_or(f64::NAN, |m| m.test_acc);
                    eprintln!("[{total} jobs] done {}: test_acc {}", job.describe(), format_g6(acc));
                }
                Err(e) => eprintln!("[{total} jobs] FAILED {}: {e}", job.describe()),
            }
        }
        result
    }))
}

/// Writes `failures.csv` and turns any failure into an error.
fn report_failures(dir: &Path, jobs: &[Job], results: &[JobResult]) -> Result<(), CliError> {
    let failed: Vec<(&Job, &TrainError)> =
        jobs.iter().zip(results).filter_map(|(j, r)| r.as_ref().err().map(|e| (j, e))).collect();
    if failed.is_empty() {
        return Ok(());
    }
    let mut csv = String::from("mode,hyper,s,seed,completed_epochs,error\n");
    for (job, err) in &failed {
        let hyper = job.hyper.map(|h| h.label()).unwrap_or_default();
        let msg = err.error.to_string().replace(['"', '\n'], "'");
        let _ =
            writeln!(csv, "{},{hyper},{},{},{},\"{msg}\"", job.mode, format_g6(job.s), job.seed, err.record.rows.len());
    }
    write_file(dir, "failures.csv", &csv)?;
    Err(CliError::JobsFailed { failed: failed.len(), total: jobs.len() })
}

fn single<T: Copy>(values: &[T], key: &str) -> Result<T, CliError> {
    match values {
        [v] => Ok(*v),
        _ => Err(CliError::Config(format!("train runs a single job; `{key}` lists {} values", values.len()))),
    }
}

/// Per-seed run of one mode and noise level. Writes
/// `run_<fingerprint>_<seed>.csv` and, on success, the checkpoint
/// `run_<fingerprint>_<seed>.qreg`.
pub fn cmd_train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<String, CliError> {
    let modes = cfg.modes.clone().unwrap_or_else(|| vec![ModeName::None]);
    let mode = single(&modes, "train.modes")?;
    let s = single(&cfg.noise_levels, "noise.s")?;
    let fingerprint = cfg.fingerprint("train", &modes);
    let data = prepare_data(cfg)?;
    let jobs = cross_product(&[mode], &[None], &[s], &cfg.seeds);
    let pool = thread_pool()?;
    let results = run_parallel(&pool, &jobs, |job| run_job(cfg, &data, job, &fingerprint, false));
    for (job, result) in jobs.iter().zip(&results) {
        let stem = format!("run_{fingerprint}_{}", job.seed);
        let record = match result {
            Ok(o) => &o.record,
            Err(e) => &e.record,
        };
        write_file(&opts.out, &format!("{stem}.csv"), &record.to_csv())?;
        match result {
            Ok(o) => {
                save_model(&o.model, opts.out.join(format!("{stem}.qreg")))?;
                if !opts.quiet {
                    let acc = o.record.final_or_last().map_or(f64::NAN, |m| m.test_acc);
                    eprintln!("{}: test_acc {}", job.describe(), format_g6(acc));
                }
            }
            Err(e) if !opts.quiet => eprintln!("{}: FAILED {e}", job.describe()),
            Err(_) => {}
        }
    }
    report_failures(&opts.out, &jobs, &results)?;
    Ok(fingerprint)
}

/// `(mode, s)` → successful final values, in seed order.
fn collect_finals(
    jobs: &[Job],
    results: &[JobResult],
    metric: impl Fn(&EpochMetrics) -> f64,
) -> BTreeMap<(ModeName, String, u64), Vec<f64>> {
    let mut cells: BTreeMap<(ModeName, String, u64), Vec<f64>> = BTreeMap::new();
    for (job, result) in jobs.iter().zip(results) {
        let key = (job.mode, job.hyper.map(|h| h.label()).unwrap_or_default(), job.s.to_bits());
        let entry = cells.entry(key).or_default();
        if let Some(m) = result.as_ref().ok().and_then(|o| final_metrics(&o.record)) {
            entry.push(metric(m));
        }
    }
    cells
}

/// Accuracy against noise level for each mode. Writes `sweep.csv` (one row
/// per job) and `sweep_mean.csv` (per mode and level, with the gain over
/// mode `none` at the same level).
pub fn cmd_noise_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<String, CliError> {
    let modes = cfg.modes.clone().unwrap_or_else(|| vec![ModeName::None, ModeName::Quantization]);
    if !modes.contains(&ModeName::None) {
        return Err(CliError::Config("key `train.modes` must include none, the baseline for gains".into()));
    }
    let fingerprint = cfg.fingerprint("noise-sweep", &modes);
    let data = prepare_data(cfg)?;
    let jobs = cross_product(&modes, &[None], &cfg.noise_levels, &cfg.seeds);
    let results = execute(cfg, &data, &jobs, &fingerprint, false, opts)?;

    let mut rows = String::from("mode,s,seed,final_test_acc\n");
    for (job, result) in jobs.iter().zip(&results) {
        let acc = result.as_ref().ok().and_then(|o| final_metrics(&o.record)).map_or(f64::NAN, |m| m.test_acc);
        let _ = writeln!(rows, "{},{},{},{}", job.mode, format_g6(job.s), job.seed, format_g6(acc));
    }
    write_file(&opts.out, "sweep.csv", &rows)?;

    let cells = collect_finals(&jobs, &results, |m| m.test_acc);
    let mean = |mode: ModeName, s: f64| cells.get(&(mode, String::new(), s.to_bits())).map(|v| mean_std(v));
    let mut summary = String::from("mode,s,mean_acc,std_acc,gain_vs_baseline\n");
    for &mode in &modes {
        for &s in &cfg.noise_levels {
            let stats = mean(mode, s).expect("every cell was scheduled");
            let base = mean(ModeName::None, s).expect("baseline was scheduled");
            let _ = writeln!(
                summary,
                "{mode},{},{},{},{}",
                format_g6(s),
                format_g6(stats.mean),
                format_g6(stats.std),
                format_g6(stats.mean - base.mean)
            );
        }
    }
    write_file(&opts.out, "sweep_mean.csv", &summary)?;
    report_failures(&opts.out, &jobs, &results)?;
    Ok(fingerprint)
}

/// Headline metric: average F1 for multi-task data, accuracy otherwise.
fn headline(m: &EpochMetrics) -> f64 {
    m.f1.as_ref().map_or(m.test_acc, |f| f.average)
}

/// Gain of each grid value over the reference value at every noise level.
/// Writes `stability.csv`.
pub fn cmd_stability_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<String, CliError> {
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("stability-sweep needs a [sweep] section with `mode` and `grid`".into()))?;
    if sweep.grid.is_empty() {
        return Err(CliError::Config("key `sweep.grid` is empty".into()));
    }
    let fingerprint = cfg.fingerprint("stability-sweep", &[sweep.mode]);
    let data = prepare_data(cfg)?;
    let hypers: Vec<Option<Hyper>> = sweep.grid.iter().copied().map(Some).collect();
    let jobs = cross_product(&[sweep.mode], &hypers, &cfg.noise_levels, &cfg.seeds);
    let results = execute(cfg, &data, &jobs, &fingerprint, false, opts)?;

    let cells = collect_finals(&jobs, &results, headline);
    let mean = |h: &Hyper, s: f64| mean_std(&cells[&(sweep.mode, h.label(), s.to_bits())]).mean;
    let mut out = String::from("mode,hyper,s,gain_vs_reference\n");
    for h in &sweep.grid {
        for &s in &cfg.noise_levels {
            let gain = mean(h, s) - mean(&sweep.reference, s);
            let _ = writeln!(out, "{},{},{},{}", sweep.mode, h.label(), format_g6(s), format_g6(gain));
        }
    }
    write_file(&opts.out, "stability.csv", &out)?;
    report_failures(&opts.out, &jobs, &results)?;
    Ok(fingerprint)
}

/// Every mode on the same noisy multi-task data with early stopping on.
/// Writes `multitask.csv`: per-task F1 means over seeds, their average and
/// their standard deviation across tasks.
pub fn cmd_multitask(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<String, CliError> {
    let multitask = match &cfg.data.source {
        DataSource::Multitask { .. } => true,
        DataSource::Csv { multitask, .. } => *multitask,
        DataSource::Blobs { .. } => false,
    };
    if !multitask {
        return Err(CliError::Config(
            "multitask needs multi-task data (`data.preset = \"multitask\"` or a multi-task csv)".into(),
        ));
    }
    let [s] = cfg.noise_levels[..] else {
        return Err(CliError::Config(format!(
            "multitask uses one noise level; `noise.s` lists {}",
            cfg.noise_levels.len()
        )));
    };
    let modes = cfg.modes.clone().unwrap_or_else(|| MULTITASK_MODES.to_vec());
    let fingerprint = cfg.fingerprint("multitask", &modes);
    let data = prepare_data(cfg)?;
    let tasks = data.head().outputs();
    let jobs = cross_product(&modes, &[None], &[s], &cfg.seeds);
    let results = execute(cfg, &data, &jobs, &fingerprint, true, opts)?;

    let mut header = vec!["mode".to_string()];
    header.extend((0..tasks).map(|t| format!("f1_t{t}")));
    header.extend(["f1_avg".to_string(), "f1_task_std".to_string()]);
    let mut out = header.join(",");
    out.push('\n');
    for &mode in &modes {
        let reports: Vec<_> = jobs
            .iter()
            .zip(&results)
            .filter(|(j, _)| j.mode == mode)
            .filter_map(|(_, r)| r.as_ref().ok().and_then(|o| final_metrics(&o.record)?.f1.clone()))
            .collect();
        let per_task: Vec<f64> =
            (0..tasks).map(|t| mean_std(&reports.iter().map(|r| r.per_task[t]).collect::<Vec<_>>()).mean).collect();
        let avg = mean_std(&reports.iter().map(|r| r.average).collect::<Vec<_>>()).mean;
        let spread = mean_std(&per_task).std;
        let _ = write!(out, "{mode}");
        for v in per_task.iter().chain([&avg, &spread]) {
            let _ = write!(out, ",{}", format_g6(*v));
        }
        out.push('\n');
    }
    write_file(&opts.out, "multitask.csv", &out)?;
    report_failures(&opts.out, &jobs, &results)?;
    Ok(fingerprint)
}
