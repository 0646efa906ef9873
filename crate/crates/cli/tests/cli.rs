use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qreg_cli::schema::{read_multitask_csv, read_run_csv, read_stability_csv, read_sweep_csv, read_sweep_mean_csv};
use qreg_core::checkpoint::load_model;
use qreg_core::nn::{build_model, Head, ModelSpec, Preset};
use qreg_core::quant::{wrap_model, QuantConfig};
use qreg_core::Rng;
use rand::SeedableRng;
use tempfile::TempDir;

const SMALL_BLOBS: &str = "[data]\npreset = \"blobs\"\nclasses = 3\nper_class = 30\ntest_per_class = 10\ndim = 6\n\
                           [model]\nhidden = [12, 8]\n";

struct Run {
    dir: TempDir,
    output: Output,
}

impl Run {
    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn code(&self) -> i32 {
        self.output.status.code().expect("exit code")
    }

    fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.output.stderr).into_owned()
    }
}

fn qreg_in(dir: TempDir, command: &str, config: &str, extra: &[&str], env: &[(&str, &str)]) -> Run {
    let path = dir.path().join("experiment.toml");
    std::fs::write(&path, config).unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qreg"));
    cmd.arg(command).arg("--config").arg(&path).arg("--out").arg(dir.path().join("out")).arg("--quiet");
    cmd.args(extra);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let output = cmd.output().unwrap();
    Run { dir, output }
}

fn qreg(command: &str, config: &str, extra: &[&str]) -> Run {
    qreg_in(TempDir::new().unwrap(), command, config, extra, &[])
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> =
        std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

#[test]
fn train_writes_record_and_checkpoint() {
    let config = format!("{SMALL_BLOBS}[train]\nepochs = 3\nmodes = [\"quantization\"]\nseeds = [7]\n");
    let run = qreg("train", &config, &[]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    let names = files(&run.out());
    assert_eq!(names.len(), 2);
    let csv = names.iter().find(|n| n.ends_with("_7.csv")).expect("run csv");
    assert!(csv.starts_with("run_") && csv.len() == "run_".len() + 16 + "_7.csv".len());
    let rows = read_run_csv(&run.out().join(csv)).unwrap();
    assert_eq!(rows.len(), 3);

    // the checkpoint loads into a freshly wrapped model of the same shape
    let ckpt = csv.replace(".csv", ".qreg");
    let mut spec = ModelSpec::new(Preset::MlpSmall, vec![6], Head::Softmax { classes: 3 });
    spec.hidden = Some(vec![12, 8]);
    let fresh = build_model(&spec, &mut Rng::seed_from_u64(0)).unwrap();
    let mut model = wrap_model(fresh, &QuantConfig::default()).unwrap();
    load_model(&mut model, run.out().join(ckpt)).unwrap();
}

#[test]
fn train_rerun_is_byte_identical() {
    let config = format!("{SMALL_BLOBS}[train]\nepochs = 3\nmodes = [\"dropout\"]\n[noise]\ns = 0.3\n");
    let a = qreg("train", &config, &[]);
    let b = qreg("train", &config, &[]);
    assert_eq!(a.code(), 0, "{}", a.stderr());
    assert_eq!(files(&a.out()), files(&b.out()));
    for name in files(&a.out()) {
        let x = std::fs::read(a.out().join(&name)).unwrap();
        let y = std::fs::read(b.out().join(&name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let run = qreg("train", "[train]\nepoch = 3\n", &[]);
    assert_eq!(run.code(), 2);
    assert!(run.stderr().contains("train.epoch"), "{}", run.stderr());
    assert!(!run.out().exists(), "no output before validation passes");
}

#[test]
fn train_refuses_several_jobs() {
    let run = qreg("train", &format!("{SMALL_BLOBS}[noise]\ns = [0.1, 0.2]\n"), &[]);
    assert_eq!(run.code(), 2);
    assert!(run.stderr().contains("noise.s"));
}

#[test]
fn divergence_exits_3_and_keeps_partial_record() {
    let config = format!("{SMALL_BLOBS}[train]\nepochs = 3\nlr = 1e300\n");
    let run = qreg("train", &config, &[]);
    assert_eq!(run.code(), 3, "{}", run.stderr());
    let names = files(&run.out());
    assert!(names.contains(&"failures.csv".to_string()));
    let csv = names.iter().find(|n| n.starts_with("run_") && n.ends_with(".csv")).expect("partial record");
    read_run_csv(&run.out().join(csv)).unwrap();
    assert!(!names.iter().any(|n| n.ends_with(".qreg")), "no checkpoint for a failed run");
}

#[test]
fn seeds_flag_overrides_config() {
    let config = format!("{SMALL_BLOBS}[train]\nepochs = 2\nseeds = [1]\n");
    let run = qreg("train", &config, &["--seeds", "4,9"]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    let names = files(&run.out());
    assert!(names.iter().any(|n| n.ends_with("_4.csv")) && names.iter().any(|n| n.ends_with("_9.csv")));
    assert!(!names.iter().any(|n| n.ends_with("_1.csv")));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let config = format!("{SMALL_BLOBS}[train]\nepochs = 2\n");
    let run = qreg_in(TempDir::new().unwrap(), "train", &config, &[], &[("QREG_THREADS", "zero")]);
    assert_eq!(run.code(), 2);
    assert!(run.stderr().contains("QREG_THREADS"));
}

#[test]
fn noise_sweep_single_baseline_row_has_zero_gain() {
    let config = format!("{SMALL_BLOBS}[train]\nepochs = 2\nmodes = [\"none\"]\nseeds = [3]\n[noise]\ns = 0\n");
    let run = qreg("noise-sweep", &config, &[]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    let rows = read_sweep_csv(&run.out().join("sweep.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].mode.as_str(), rows[0].s, rows[0].seed), ("none", 0.0, 3));
    let mean = read_sweep_mean_csv(&run.out().join("sweep_mean.csv")).unwrap();
    assert_eq!(mean.len(), 1);
    assert_eq!(mean[0].gain_vs_baseline, 0.0);
}

#[test]
fn noise_sweep_is_the_full_cross_product() {
    let config = format!(
        "{SMALL_BLOBS}[train]\nepochs = 2\nmodes = [\"none\", \"quantization\", \"label_smoothing\"]\nseeds = [0, 1]\n\
         [noise]\ns = [0.0, 0.5]\n"
    );
    let run = qreg_in(TempDir::new().unwrap(), "noise-sweep", &config, &[], &[("QREG_THREADS", "2")]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    let rows = read_sweep_csv(&run.out().join("sweep.csv")).unwrap();
    assert_eq!(rows.len(), 3 * 2 * 2);
    let mean = read_sweep_mean_csv(&run.out().join("sweep_mean.csv")).unwrap();
    assert_eq!(mean.len(), 3 * 2);
    for row in mean.iter().filter(|r| r.mode == "none") {
        assert_eq!(row.gain_vs_baseline, 0.0);
    }
    // the mean file agrees with the per-job file
    for row in &mean {
        let accs: Vec<f64> =
            rows.iter().filter(|r| r.mode == row.mode && r.s == row.s).map(|r| r.final_test_acc).collect();
        let m = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((m - row.mean_acc).abs() < 1e-5, "{row:?}");
    }
}

#[test]
fn noise_sweep_requires_baseline_mode() {
    let run = qreg("noise-sweep", &format!("{SMALL_BLOBS}[train]\nmodes = [\"quantization\"]\n"), &[]);
    assert_eq!(run.code(), 2);
    assert!(run.stderr().contains("none"));
}

#[test]
fn stability_single_value_grid_has_zero_gains() {
    let config = format!(
        "{SMALL_BLOBS}[train]\nepochs = 2\nseeds = [0, 1]\n[noise]\ns = [0.0, 0.3]\n\
         [sweep]\nmode = \"dropout\"\ngrid = [0.2]\n"
    );
    let run = qreg("stability-sweep", &config, &[]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    let rows = read_stability_csv(&run.out().join("stability.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.gain_vs_reference == 0.0 && r.hyper == "0.2"));
}

#[test]
fn stability_quantization_grid_rows() {
    let config = format!(
        "{SMALL_BLOBS}[train]\nepochs = 2\n[noise]\ns = [0.0, 0.2]\n\
         [sweep]\nmode = \"quantization\"\ngrid = [\"W4/A4\", \"W6/A6\", \"W8/A8\"]\nreference = \"W6/A6\"\n"
    );
    let run = qreg("stability-sweep", &config, &[]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    let rows = read_stability_csv(&run.out().join("stability.csv")).unwrap();
    assert_eq!(rows.len(), 3 * 2);
    let hypers: Vec<&str> = rows.iter().map(|r| r.hyper.as_str()).collect();
    assert_eq!(hypers, ["W4/A4", "W4/A4", "W6/A6", "W6/A6", "W8/A8", "W8/A8"]);
    assert!(rows.iter().filter(|r| r.hyper == "W6/A6").all(|r| r.gain_vs_reference == 0.0));
}

#[test]
fn stability_needs_a_grid() {
    let empty = qreg("stability-sweep", &format!("{SMALL_BLOBS}[sweep]\nmode = \"pruning\"\ngrid = []\n"), &[]);
    assert_eq!(empty.code(), 2);
    let missing = qreg("stability-sweep", SMALL_BLOBS, &[]);
    assert_eq!(missing.code(), 2);
    assert!(missing.stderr().contains("[sweep]"));
}

#[test]
fn multitask_emits_one_row_per_mode() {
    let config = "[data]\npreset = \"multitask\"\ntasks = 4\ntrain_size = 200\ntest_size = 100\ndim = 6\n\
                  [model]\nhidden = [12, 8]\n[train]\nepochs = 3\nseeds = [0, 1]\n[noise]\ns = 0.3\n\
                  [regularization]\npatience = 1\n";
    let run = qreg("multitask", config, &[]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    let rows = read_multitask_csv(&run.out().join("multitask.csv")).unwrap();
    let modes: Vec<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
    assert_eq!(modes, ["none", "weight_decay", "dropout", "label_smoothing", "pruning", "quantization"]);
    for row in &rows {
        assert_eq!(row.per_task.len(), 4);
        let avg = row.per_task.iter().sum::<f64>() / 4.0;
        assert!((avg - row.f1_avg).abs() < 1e-5, "{row:?}");
        assert!(row.f1_task_std >= 0.0);
    }
}

#[test]
fn multitask_refuses_single_task_data() {
    let run = qreg("multitask", SMALL_BLOBS, &[]);
    assert_eq!(run.code(), 2);
}

#[test]
fn csv_data_source_trains() {
    let dir = TempDir::new().unwrap();
    let mut train = String::from("label,f0,f1\n");
    let mut test = train.clone();
    for i in 0..40 {
        let c = i % 2;
        let x = if c == 0 { -1.0 } else { 1.0 } + (i as f64) * 0.01;
        train.push_str(&format!("{c},{x},{}\n", -x));
        if i < 10 {
            test.push_str(&format!("{c},{x},{}\n", -x));
        }
    }
    std::fs::write(dir.path().join("train.csv"), train).unwrap();
    std::fs::write(dir.path().join("test.csv"), test).unwrap();
    let config = "[data]\npreset = \"csv\"\ntrain_path = \"train.csv\"\ntest_path = \"test.csv\"\n\
                  [model]\npreset = \"linear\"\n[train]\nepochs = 2\n";
    let run = qreg_in(dir, "train", config, &[], &[]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
}
