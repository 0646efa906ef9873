//! Experiment configuration: a flat TOML subset with fixed sections.
//!
//! Every key is optional and falls back to a default. Each resolved value
//! (given or default) is recorded as a canonical `section.key = value` line;
//! the sorted lines, minus seeds, hash to the config fingerprint.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use qreg_core::nn::{DropoutPosition, Preset};
use qreg_core::pruning::{PruneCriterion, PruneSpec};
use qreg_core::quant::QuantConfig;
use qreg_core::regularization::{EarlyStopConfig, StopMetric};
use qreg_core::train::{AdamConfig, Regularizer};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::CliError;

const SECTIONS: [&str; 8] = ["data", "model", "train", "noise", "regularization", "quant", "pruning", "sweep"];

/// Regularizer selection, without its hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModeName {
    None,
    WeightDecay,
    Dropout,
    LabelSmoothing,
    EarlyStopping,
    Pruning,
    Quantization,
}

impl ModeName {
    pub const ALL: [ModeName; 7] = [
        ModeName::None,
        ModeName::WeightDecay,
        ModeName::Dropout,
        ModeName::LabelSmoothing,
        ModeName::EarlyStopping,
        ModeName::Pruning,
        ModeName::Quantization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModeName::None => "none",
            ModeName::WeightDecay => "weight_decay",
            ModeName::Dropout => "dropout",
            ModeName::LabelSmoothing => "label_smoothing",
            ModeName::EarlyStopping => "early_stopping",
            ModeName::Pruning => "pruning",
            ModeName::Quantization => "quantization",
        }
    }
}

impl fmt::Display for ModeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModeName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ModeName::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = ModeName::ALL.iter().map(|m| m.name()).collect();
            format!("unknown mode {s:?} (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Blobs {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        separation: f64,
    },
    Multitask {
        tasks: usize,
        train_size: usize,
        test_size: usize,
        dim: usize,
    },
    Csv {
        train_path: PathBuf,
        test_path: PathBuf,
        multitask: bool,
        classes: Option<usize>,
        image_shape: Option<Vec<usize>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Seed of the synthetic generators; shared by every run.
    pub seed: u64,
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    pub hidden: Option<Vec<usize>>,
    pub batchnorm: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularizationConfig {
    pub weight_decay: f64,
    pub dropout: f64,
    pub dropout_position: DropoutPosition,
    pub label_smoothing: f64,
    pub early_stop: EarlyStopConfig,
}

/// One point of a stability grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Hyper {
    Bits { weight: u32, act: u32 },
    Value(f64),
}

impl Hyper {
    pub fn label(&self) -> String {
        match *self {
            Hyper::Bits { weight, act } => format!("W{weight}/A{act}"),
            Hyper::Value(v) => qreg_core::metrics::format_g6(v),
        }
    }
}

fn parse_bits(s: &str) -> Option<Hyper> {
    let (w, a) = s.strip_prefix('W')?.split_once("/A")?;
    Some(Hyper::Bits { weight: w.parse().ok()?, act: a.parse().ok()? })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub mode: ModeName,
    pub grid: Vec<Hyper>,
    pub reference: Hyper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub adam: AdamConfig,
    pub seeds: Vec<u64>,
    /// `None` lets each command pick its default mode list.
    pub modes: Option<Vec<ModeName>>,
    pub noise_levels: Vec<f64>,
    pub exclude_original: bool,
    pub regularization: RegularizationConfig,
    pub quant: QuantConfig,
    pub keep_batchnorm: bool,
    pub pruning: PruneSpec,
    pub sweep: Option<SweepConfig>,
    canonical: BTreeMap<String, String>,
}

/// Renders resolved values into canonical text.
trait Canonical {
    fn canonical(&self) -> String;
}

impl Canonical for f64 {
    fn canonical(&self) -> String {
        format!("{self:?}")
    }
}

impl Canonical for i64 {
    fn canonical(&self) -> String {
        self.to_string()
    }
}

impl Canonical for bool {
    fn canonical(&self) -> String {
        self.to_string()
    }
}

impl Canonical for String {
    fn canonical(&self) -> String {
        format!("{self:?}")
    }
}

impl<T: Canonical> Canonical for Vec<T> {
    fn canonical(&self) -> String {
        let items: Vec<String> = self.iter().map(Canonical::canonical).collect();
        format!("[{}]", items.join(", "))
    }
}

/// Reads typed keys out of one section and remembers which were consumed.
struct Section<'t, 'c> {
    name: &'static str,
    table: Option<&'t Table>,
    used: BTreeSet<String>,
    canonical: &'c mut BTreeMap<String, String>,
}

impl<'t, 'c> Section<'t, 'c> {
    fn new(
        name: &'static str,
        tables: &BTreeMap<&str, &'t Table>,
        canonical: &'c mut BTreeMap<String, String>,
    ) -> Self {
        Section { name, table: tables.get(name).copied(), used: BTreeSet::new(), canonical }
    }

    fn key(&self, key: &str) -> String {
        format!("{}.{}", self.name, key)
    }

    fn has(&self, key: &str) -> bool {
        self.table.is_some_and(|t| t.contains_key(key))
    }

    fn raw(&mut self, key: &str) -> Option<&'t Value> {
        self.used.insert(key.to_string());
        self.table.and_then(|t| t.get(key))
    }

    fn type_error(&self, key: &str, expected: &str) -> CliError {
        CliError::Config(format!("key `{}` must be {expected}", self.key(key)))
    }

    fn record<T: Canonical>(&mut self, key: &str, value: &T) {
        let k = self.key(key);
        self.canonical.insert(k, value.canonical());
    }

    fn opt<T: Canonical>(
        &mut self,
        key: &str,
        expected: &str,
        convert: impl Fn(&Value) -> Option<T>,
    ) -> Result<Option<T>, CliError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => {
                let parsed = convert(v).ok_or_else(|| self.type_error(key, expected))?;
                self.record(key, &parsed);
                Ok(Some(parsed))
            }
        }
    }

    fn or<T: Canonical>(
        &mut self,
        key: &str,
        default: T,
        expected: &str,
        convert: impl Fn(&Value) -> Option<T>,
    ) -> Result<T, CliError> {
        let v = self.opt(key, expected, convert)?.unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    fn float(&mut self, key: &str, default: f64) -> Result<f64, CliError> {
        self.or(key, default, "a number", as_float)
    }

    fn int(&mut self, key: &str, default: usize) -> Result<usize, CliError> {
        let v = self.or(key, default as i64, "a non-negative integer", as_int)?;
        Ok(v as usize)
    }

    fn boolean(&mut self, key: &str, default: bool) -> Result<bool, CliError> {
        self.or(key, default, "true or false", Value::as_bool)
    }

    fn string(&mut self, key: &str, default: &str) -> Result<String, CliError> {
        self.or(key, default.to_string(), "a quoted string", |v| v.as_str().map(String::from))
    }

    fn parsed<T: FromStr>(&mut self, key: &str, default: &str) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        let s = self.string(key, default)?;
        s.parse().map_err(|e| CliError::Config(format!("key `{}`: {e}", self.key(key))))
    }

    fn int_list(&mut self, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        let v = self.opt(key, "a list of non-negative integers", |v| list(v, as_int))?;
        Ok(v.map(|xs| xs.into_iter().map(|x| x as usize).collect()))
    }

    /// A number or a list of numbers.
    fn float_list(&mut self, key: &str, default: Vec<f64>) -> Result<Vec<f64>, CliError> {
        self.or(key, default, "a number or a list of numbers", |v| match v {
            Value::Array(_) => list(v, as_float),
            other => as_float(other).map(|x| vec![x]),
        })
    }

    fn string_list(&mut self, key: &str) -> Result<Option<Vec<String>>, CliError> {
        self.opt(key, "a list of quoted strings", |v| list(v, |x| x.as_str().map(String::from)))
    }

    /// Errors on the first key present in the file but never read.
    fn finish(self) -> Result<(), CliError> {
        if let Some(t) = self.table {
            if let Some(k) = t.keys().find(|k| !self.used.contains(*k)) {
                return Err(CliError::Config(format!("unknown key `{}.{}`", self.name, k)));
            }
        }
        Ok(())
    }
}

fn as_float(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_int(v: &Value) -> Option<i64> {
    v.as_integer().filter(|i| *i >= 0)
}

fn list<T>(v: &Value, item: impl Fn(&Value) -> Option<T>) -> Option<Vec<T>> {
    v.as_array()?.iter().map(item).collect()
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg()))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative data paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| invalid(format!("config syntax: {e}")))?;
        let mut tables: BTreeMap<&str, &Table> = BTreeMap::new();
        for (name, value) in &root {
            let Some(section) = SECTIONS.iter().find(|s| **s == name) else {
                return Err(match value {
                    Value::Table(_) => invalid(format!("unknown section [{name}]")),
                    _ => invalid(format!("key `{name}` must sit inside a section")),
                });
            };
            let Value::Table(t) = value else {
                return Err(invalid(format!("`{name}` must be a [{name}] section")));
            };
            if let Some((k, _)) = t.iter().find(|(_, v)| v.is_table()) {
                return Err(invalid(format!("nested table `{name}.{k}` is not allowed")));
            }
            tables.insert(section, t);
        }
        let mut canon = BTreeMap::new();

        let mut s = Section::new("data", &tables, &mut canon);
        let preset = s.string("preset", "blobs")?;
        let source = match preset.as_str() {
            "blobs" => DataSource::Blobs {
                classes: s.int("classes", 10)?,
                per_class: s.int("per_class", 200)?,
                test_per_class: s.int("test_per_class", 100)?,
                dim: s.int("dim", 32)?,
                separation: s.float("separation", 4.5)?,
            },
            "multitask" => DataSource::Multitask {
                tasks: s.int("tasks", 12)?,
                train_size: s.int("train_size", 8000)?,
                test_size: s.int("test_size", 2000)?,
                dim: s.int("dim", 32)?,
            },
            "csv" => {
                for key in ["train_path", "test_path"] {
                    check(s.has(key), || format!("key `data.{key}` is required for preset csv"))?;
                }
                let train_path = base.join(s.string("train_path", "")?);
                let test_path = base.join(s.string("test_path", "")?);
                let multitask = s.boolean("multitask", false)?;
                let classes = s.opt("classes", "a non-negative integer", as_int)?.map(|c| c as usize);
                let image_shape = s.int_list("image_shape")?;
                DataSource::Csv { train_path, test_path, multitask, classes, image_shape }
            }
            other => {
                return Err(invalid(format!(
                    "key `data.preset`: unknown preset {other:?} (expected blobs, multitask or csv)"
                )))
            }
        };
        let data_seed = s.int("seed", 0)? as u64;
        let val_fraction = s.float("val_fraction", 0.1)?;
        s.finish()?;
        check((0.0..1.0).contains(&val_fraction), || {
            format!("key `data.val_fraction` = {val_fraction} outside [0, 1)")
        })?;
        match &source {
            DataSource::Blobs { classes, per_class, test_per_class, dim, separation } => {
                check(*classes >= 2, || "key `data.classes` must be at least 2".into())?;
                check(*per_class >= 1 && *test_per_class >= 1, || "blobs sizes must be positive".into())?;
                check(*dim >= 1, || "key `data.dim` must be positive".into())?;
                check(separation.is_finite() && *separation >= 0.0, || "key `data.separation` must be >= 0".into())?;
            }
            DataSource::Multitask { tasks, train_size, test_size, dim } => {
                check(*tasks >= 1, || "key `data.tasks` must be positive".into())?;
                check(*train_size >= 2 && *test_size >= 1, || "multitask sizes must be positive".into())?;
                check(*dim >= 1, || "key `data.dim` must be positive".into())?;
            }
            DataSource::Csv { .. } => {}
        }
        let data = DataConfig { source, seed: data_seed, val_fraction };

        let mut s = Section::new("model", &tables, &mut canon);
        let model = ModelConfig {
            preset: s.parsed("preset", "mlp-small")?,
            hidden: s.int_list("hidden")?,
            batchnorm: s.boolean("batchnorm", true)?,
        };
        s.finish()?;

        let mut s = Section::new("train", &tables, &mut canon);
        let epochs = s.int("epochs", 30)?;
        let batch_size = s.int("batch_size", 64)?;
        let eval_batch = s.int("eval_batch", 512)?;
        let adam = AdamConfig {
            lr: s.float("lr", 1e-3)?,
            beta1: s.float("beta1", 0.9)?,
            beta2: s.float("beta2", 0.999)?,
            eps: s.float("eps", 1e-8)?,
        };
        // seeds stay out of the fingerprint
        let seeds = match s.raw("seeds") {
            None => vec![0],
            Some(v) => list(v, as_int)
                .ok_or_else(|| s.type_error("seeds", "a list of non-negative integers"))?
                .into_iter()
                .map(|x| x as u64)
                .collect(),
        };
        let modes = match s.string_list("modes")? {
            None => None,
            Some(names) => Some(
                names
                    .iter()
                    .map(|n| n.parse::<ModeName>().map_err(|e| invalid(format!("key `train.modes`: {e}"))))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        s.finish()?;
        check(epochs >= 1, || "key `train.epochs` must be positive".into())?;
        check(batch_size >= 2, || "key `train.batch_size` must be at least 2".into())?;
        check(eval_batch >= 1, || "key `train.eval_batch` must be positive".into())?;
        adam.validate().map_err(|e| invalid(format!("[train] {e}")))?;
        check(!seeds.is_empty(), || "key `train.seeds` must not be empty".into())?;
        if let Some(m) = &modes {
            check(!m.is_empty(), || "key `train.modes` must not be empty".into())?;
            let unique: BTreeSet<_> = m.iter().collect();
            check(unique.len() == m.len(), || "key `train.modes` lists a mode twice".into())?;
        }

        let mut s = Section::new("noise", &tables, &mut canon);
        let noise_levels = s.float_list("s", vec![0.0])?;
        let exclude_original = s.boolean("exclude_original", false)?;
        s.finish()?;
        check(!noise_levels.is_empty(), || "key `noise.s` must not be empty".into())?;
        for &x in &noise_levels {
            check((0.0..=1.0).contains(&x), || format!("key `noise.s`: {x} outside [0, 1]"))?;
        }

        let mut s = Section::new("regularization", &tables, &mut canon);
        let regularization = RegularizationConfig {
            weight_decay: s.float("weight_decay", 0.01)?,
            dropout: s.float("dropout", 0.1)?,
            dropout_position: match s.string("dropout_position", "hidden")?.as_str() {
                "hidden" => DropoutPosition::Hidden,
                "last" => DropoutPosition::Last,
                other => {
                    return Err(invalid(format!(
                        "key `regularization.dropout_position`: unknown position {other:?} (expected hidden or last)"
                    )))
                }
            },
            label_smoothing: s.float("label_smoothing", 0.1)?,
            early_stop: EarlyStopConfig {
                patience: s.int("patience", 5)?,
                metric: s.parsed::<StopMetric>("stop_metric", "val_loss")?,
            },
        };
        s.finish()?;

        let mut s = Section::new("quant", &tables, &mut canon);
        let bits = |s: &mut Section, key: &str, default: u32| {
            s.int(key, default as usize).map(|b| b.min(u32::MAX as usize) as u32)
        };
        let quant = QuantConfig {
            weight_bits: bits(&mut s, "weight_bits", 4)?,
            act_bits: bits(&mut s, "act_bits", 4)?,
            boundary_bits: bits(&mut s, "boundary_bits", 8)?,
            ema_momentum: s.float("ema_momentum", 0.99)?,
            enabled: s.boolean("enabled", true)?,
        };
        let keep_batchnorm = s.boolean("keep_batchnorm", false)?;
        s.finish()?;

        let mut s = Section::new("pruning", &tables, &mut canon);
        let pruning = PruneSpec {
            ratio: s.float("ratio", 0.75)?,
            criterion: s.parsed::<PruneCriterion>("criterion", "lowest")?,
            warmup_epochs: s.int("warmup_epochs", (epochs as f64 / 4.0).round() as usize)?,
        };
        s.finish()?;
        check(pruning.warmup_epochs < epochs, || "key `pruning.warmup_epochs` must be below `train.epochs`".into())?;

        let sweep = if tables.contains_key("sweep") {
            let mut s = Section::new("sweep", &tables, &mut canon);
            let mode: ModeName = s.parsed("mode", "quantization")?;
            let grid_raw = s.raw("grid").ok_or_else(|| invalid("key `sweep.grid` is required in [sweep]"))?;
            let reference_raw = s.raw("reference");
            let parse_hyper = |v: &Value, key: &str| -> Result<Hyper, CliError> {
                let h = match (mode, v) {
                    (ModeName::Quantization, Value::String(t)) => parse_bits(t),
                    (ModeName::Quantization, _) => None,
                    (_, v) => as_float(v).map(Hyper::Value),
                };
                h.ok_or_else(|| {
                    let expected = if mode == ModeName::Quantization { "`Wb/Aa` strings" } else { "numbers" };
                    invalid(format!("key `sweep.{key}`: {mode} grid values must be {expected}"))
                })
            };
            let grid = grid_raw
                .as_array()
                .ok_or_else(|| invalid("key `sweep.grid` must be a list"))?
                .iter()
                .map(|v| parse_hyper(v, "grid"))
                .collect::<Result<Vec<_>, _>>()?;
            check(!grid.is_empty(), || "key `sweep.grid` is empty".into())?;
            check(
                matches!(
                    mode,
                    ModeName::Quantization
                        | ModeName::Pruning
                        | ModeName::Dropout
                        | ModeName::WeightDecay
                        | ModeName::LabelSmoothing
                ),
                || format!("key `sweep.mode`: {mode} has no hyper-parameter to sweep"),
            )?;
            let reference = match reference_raw {
                Some(v) => parse_hyper(v, "reference")?,
                None => grid[0],
            };
            check(grid.contains(&reference), || {
                format!("key `sweep.reference` = {} is not in `sweep.grid`", reference.label())
            })?;
            s.record("grid", &grid.iter().map(Hyper::label).collect::<Vec<_>>());
            s.record("reference", &reference.label());
            s.finish()?;
            Some(SweepConfig { mode, grid, reference })
        } else {
            None
        };

        let cfg = ExperimentConfig {
            data,
            model,
            epochs,
            batch_size,
            eval_batch,
            adam,
            seeds,
            modes,
            noise_levels,
            exclude_original,
            regularization,
            quant,
            keep_batchnorm,
            pruning,
            sweep,
            canonical: canon,
        };
        for mode in ModeName::ALL {
            cfg.regularizer(mode).validate().map_err(|e| invalid(format!("[{}] {e}", section_of(mode))))?;
        }
        if let Some(sw) = &cfg.sweep {
            for h in &sw.grid {
                cfg.with_hyper(sw.mode, *h)
                    .regularizer(sw.mode)
                    .validate()
                    .map_err(|e| invalid(format!("[sweep] {e}")))?;
            }
        }
        Ok(cfg)
    }

    /// The regularizer a mode stands for under this config.
    pub fn regularizer(&self, mode: ModeName) -> Regularizer {
        let r = &self.regularization;
        match mode {
            ModeName::None => Regularizer::None,
            ModeName::WeightDecay => Regularizer::WeightDecay(r.weight_decay),
            ModeName::Dropout => Regularizer::Dropout { p: r.dropout, position: r.dropout_position },
            ModeName::LabelSmoothing => Regularizer::LabelSmoothing(r.label_smoothing),
            ModeName::EarlyStopping => Regularizer::EarlyStopping(r.early_stop),
            ModeName::Pruning => Regularizer::Pruning(self.pruning),
            ModeName::Quantization => {
                Regularizer::Quantization { config: self.quant, keep_batchnorm: self.keep_batchnorm }
            }
        }
    }

    /// Copy with one grid point applied to `mode`'s hyper-parameter.
    pub fn with_hyper(&self, mode: ModeName, hyper: Hyper) -> ExperimentConfig {
        let mut cfg = self.clone();
        match (mode, hyper) {
            (ModeName::Quantization, Hyper::Bits { weight, act }) => {
                cfg.quant.weight_bits = weight;
                cfg.quant.act_bits = act;
            }
            (ModeName::Pruning, Hyper::Value(v)) => cfg.pruning.ratio = v,
            (ModeName::Dropout, Hyper::Value(v)) => cfg.regularization.dropout = v,
            (ModeName::WeightDecay, Hyper::Value(v)) => cfg.regularization.weight_decay = v,
            (ModeName::LabelSmoothing, Hyper::Value(v)) => cfg.regularization.label_smoothing = v,
            _ => {}
        }
        cfg
    }

    /// Canonical `section.key = value` lines, sorted, seeds excluded.
    pub fn canonical_lines(&self) -> Vec<String> {
        self.canonical.iter().map(|(k, v)| format!("{k} = {v}")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the command name, the resolved
    /// mode list and the canonical lines.
    pub fn fingerprint(&self, command: &str, modes: &[ModeName]) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("command = {command}\n"));
        let names: Vec<&str> = modes.iter().map(|m| m.name()).collect();
        hasher.update(format!("modes = {}\n", names.join(",")));
        for line in self.canonical_lines() {
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
        }
        hex16(&hasher.finalize())
    }
}

/// First 16 hex digits of a digest.
pub fn hex16(digest: &[u8]) -> String {
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn section_of(mode: ModeName) -> &'static str {
    match mode {
        ModeName::Quantization => "quant",
        ModeName::Pruning => "pruning",
        _ => "regularization",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::parse(text, Path::new("."))
    }

    fn config_error(text: &str) -> String {
        match parse(text) {
            Err(CliError::Config(msg)) => msg,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.noise_levels, vec![0.0]);
        assert_eq!(cfg.quant, QuantConfig::default());
        assert_eq!(cfg.pruning.warmup_epochs, 8);
        assert!(matches!(cfg.data.source, DataSource::Blobs { classes: 10, dim: 32, .. }));
    }

    #[test]
    fn unknown_keys_and_sections_are_named() {
        assert!(config_error("[train]\nepoch = 3\n").contains("`train.epoch`"));
        assert!(config_error("[trainer]\nepochs = 3\n").contains("[trainer]"));
        assert!(config_error("epochs = 3\n").contains("`epochs`"));
        // keys of another preset are not accepted either
        assert!(config_error("[data]\npreset = \"blobs\"\ntasks = 4\n").contains("`data.tasks`"));
    }

    #[test]
    fn type_and_range_errors_name_the_key() {
        assert!(config_error("[train]\nepochs = \"ten\"\n").contains("`train.epochs`"));
        assert!(config_error("[train]\nepochs = -1\n").contains("`train.epochs`"));
        assert!(config_error("[noise]\ns = [0.2, 1.5]\n").contains("`noise.s`"));
        assert!(config_error("[train]\nmodes = [\"fancy\"]\n").contains("`train.modes`"));
        assert!(config_error("[quant]\nweight_bits = 1\n").contains("weight_bits"));
        assert!(config_error("[data]\npreset = \"csv\"\n").contains("`data.train_path`"));
    }

    #[test]
    fn sweep_grid_rules() {
        assert!(config_error("[sweep]\nmode = \"quantization\"\ngrid = []\n").contains("empty"));
        assert!(config_error("[sweep]\nmode = \"pruning\"\ngrid = [0.5]\nreference = 0.75\n").contains("reference"));
        assert!(config_error("[sweep]\nmode = \"quantization\"\ngrid = [4]\n").contains("`sweep.grid`"));
        assert!(config_error("[sweep]\nmode = \"none\"\ngrid = [1]\n").contains("`sweep.mode`"));
        let cfg = parse("[sweep]\nmode = \"quantization\"\ngrid = [\"W4/A4\", \"W8/A8\"]\n").unwrap();
        let sweep = cfg.sweep.unwrap();
        assert_eq!(sweep.reference, Hyper::Bits { weight: 4, act: 4 });
        assert_eq!(sweep.grid[1].label(), "W8/A8");
    }

    #[test]
    fn fingerprint_ignores_layout_defaults_and_seeds() {
        let a = parse("[train]\nepochs = 30\nseeds = [1]\n[noise]\ns = 0.0\n").unwrap();
        let b = parse("# comment\n[noise]\ns = [0]\n\n[train]\nseeds = [4, 5]\n").unwrap();
        let modes = [ModeName::None];
        assert_eq!(a.fingerprint("train", &modes), b.fingerprint("train", &modes));
        assert_eq!(a.fingerprint("train", &modes).len(), 16);
    }

    #[test]
    fn fingerprint_tracks_values_command_and_modes() {
        let a = parse("[train]\nepochs = 30\n").unwrap();
        let b = parse("[train]\nepochs = 31\n").unwrap();
        let modes = [ModeName::None];
        assert_ne!(a.fingerprint("train", &modes), b.fingerprint("train", &modes));
        assert_ne!(a.fingerprint("train", &modes), a.fingerprint("noise-sweep", &modes));
        assert_ne!(a.fingerprint("train", &modes), a.fingerprint("train", &[ModeName::Quantization]));
    }

    #[test]
    fn hyper_overrides_reach_the_regularizer() {
        let cfg = parse("").unwrap();
        let q = cfg.with_hyper(ModeName::Quantization, Hyper::Bits { weight: 6, act: 8 });
        assert!(matches!(
            q.regularizer(ModeName::Quantization),
            Regularizer::Quantization { config: QuantConfig { weight_bits: 6, act_bits: 8, .. }, .. }
        ));
        let p = cfg.with_hyper(ModeName::Pruning, Hyper::Value(0.5));
        assert!(
            matches!(p.regularizer(ModeName::Pruning), Regularizer::Pruning(PruneSpec { ratio, .. }) if ratio == 0.5)
        );
    }
}
