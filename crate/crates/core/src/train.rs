//! Adam, regularizer modes and the epoch loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::autodiff::Graph;
use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, binary_accuracy, f1_per_task, EpochMetrics, EpochRow, RunRecord};
use crate::nn::{binary_ce_loss, cross_entropy_loss, DropoutPosition, Head, Model, Phase};
use crate::pruning::{prune_model, PruneSpec};
use crate::quant::{wrap_model, QuantConfig};
use crate::regularization::{
    smooth_binary_labels, smooth_labels, weight_decay_loss, EarlyStopConfig, EarlyStopping, StopDecision,
};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moments per parameter, sized on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(config: AdamConfig) -> Self {
        OptimState { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Forgets the moments, e.g. after the parameter shapes changed.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }
}

/// One bias-corrected Adam update. Gradients are checked for NaN or infinity
/// before anything is modified.
pub fn adam_step(params: &mut [&mut Tensor], names: &[String], grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || names.len() != grads.len() {
        return Err(Error::dim(format!(
            "{} parameters, {} names, {} gradients",
            params.len(),
            names.len(),
            grads.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(Error::dim(format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::Training(format!("non-finite gradient for {name}")));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
        return Err(Error::dim("optimizer moments no longer match the parameters"));
    }

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((theta, &g), m), v) in it {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regularizer {
    None,
    WeightDecay(f64),
    Dropout { p: f64, position: DropoutPosition },
    LabelSmoothing(f64),
    EarlyStopping(EarlyStopConfig),
    Pruning(PruneSpec),
    Quantization { config: QuantConfig, keep_batchnorm: bool },
}

impl Regularizer {
    pub fn mode_name(&self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::WeightDecay(_) => "weight_decay",
            Regularizer::Dropout { .. } => "dropout",
            Regularizer::LabelSmoothing(_) => "label_smoothing",
            Regularizer::EarlyStopping(_) => "early_stopping",
            Regularizer::Pruning(_) => "pruning",
            Regularizer::Quantization { .. } => "quantization",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Regularizer::None => Ok(()),
            Regularizer::WeightDecay(a) if a >= 0.0 && a.is_finite() => Ok(()),
            Regularizer::Dropout { p, .. } if (0.0..1.0).contains(&p) => Ok(()),
            Regularizer::LabelSmoothing(a) if (0.0..1.0).contains(&a) => Ok(()),
            Regularizer::EarlyStopping(_) => Ok(()),
            Regularizer::Pruning(spec) if (0.0..1.0).contains(&spec.ratio) => Ok(()),
            Regularizer::Quantization { config, .. } => config.validate(),
            other => Err(Error::contract(format!("invalid {} setting: {other:?}", other.mode_name()))),
        }
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mode_name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seed of the shuffling and dropout stream.
    pub seed: u64,
    pub regularizers: Vec<Regularizer>,
    /// Several active regularizers are refused unless this is set.
    pub combine: bool,
    pub eval_batch: usize,
    pub fingerprint: String,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64, mode: Regularizer) -> Self {
        TrainConfig {
            epochs,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed,
            regularizers: vec![mode],
            combine: false,
            eval_batch: 512,
            fingerprint: String::new(),
        }
    }

    fn active(&self) -> impl Iterator<Item = &Regularizer> {
        self.regularizers.iter().filter(|r| !matches!(r, Regularizer::None))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be positive"));
        }
        if self.batch_size < 2 || self.eval_batch == 0 {
            return Err(Error::contract(format!("batch size {} must be at least 2", self.batch_size)));
        }
        self.adam.validate()?;
        for r in &self.regularizers {
            r.validate()?;
        }
        let active: Vec<&str> = self.active().map(Regularizer::mode_name).collect();
        if active.len() > 1 && !self.combine {
            return Err(Error::contract(format!(
                "regularizers {} are active together; set the combine flag to allow it",
                active.join(", ")
            )));
        }
        let mut seen = active.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != active.len() {
            return Err(Error::contract("a regularizer mode is listed twice"));
        }
        Ok(())
    }

    fn find<T>(&self, pick: impl Fn(&Regularizer) -> Option<T>) -> Option<T> {
        self.regularizers.iter().find_map(pick)
    }

    pub fn weight_decay(&self) -> Option<f64> {
        self.find(|r| match r {
            Regularizer::WeightDecay(a) => Some(*a),
            _ => None,
        })
    }

    pub fn smoothing(&self) -> Option<f64> {
        self.find(|r| match r {
            Regularizer::LabelSmoothing(a) => Some(*a),
            _ => None,
        })
    }

    pub fn early_stop(&self) -> Option<EarlyStopConfig> {
        self.find(|r| match r {
            Regularizer::EarlyStopping(c) => Some(*c),
            _ => None,
        })
    }

    pub fn pruning(&self) -> Option<PruneSpec> {
        self.find(|r| match r {
            Regularizer::Pruning(s) => Some(*s),
            _ => None,
        })
    }
}

/// Applies the architectural side of the regularizers: dropout layers and
/// the quantization wrapper (which drops trunk batch norms unless told to
/// keep them).
pub fn prepare_model(mut model: Model, config: &TrainConfig) -> Result<Model> {
    for r in &config.regularizers {
        match *r {
            Regularizer::Dropout { p, position } => model.insert_dropout(p, position)?,
            Regularizer::Quantization { config: q, keep_batchnorm } => {
                if q.enabled && !keep_batchnorm {
                    model.strip_batchnorm();
                }
                model = wrap_model(model, &q)?;
            }
            _ => {}
        }
    }
    Ok(model)
}

/// Called from inside the loop; the default methods do nothing.
pub trait TrainObserver {
    /// The exact targets handed to the loss for one mini-batch.
    fn on_batch(&mut self, _epoch: usize, _indices: &[usize], _targets: &Tensor) {}
    fn on_epoch(&mut self, _row: &EpochRow) {}
}

impl TrainObserver for () {}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub record: RunRecord,
    /// Set under early stopping: the epoch whose weights were restored.
    pub best_epoch: Option<usize>,
}

/// A run that stopped on a numeric failure; `record` holds every epoch that
/// completed before it.
#[derive(Debug, thiserror::Error)]
#[error("{error} (after {} completed epochs)", record.rows.len())]
pub struct TrainError {
    #[source]
    pub error: Error,
    pub record: Box<RunRecord>,
}

pub struct Evaluation {
    pub loss: f64,
    pub acc: f64,
    pub logits: Tensor,
}

/// Eval-mode loss against hard targets and accuracy (per-entry for
/// multi-task data).
pub fn evaluate(model: &Model, ds: &Dataset, batch: usize) -> Result<Evaluation> {
    let logits = model.predict_batched(ds.features(), batch)?;
    let targets = ds.labels().all_targets();
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let (loss, acc) = match ds.labels() {
        Labels::Classes { ids, .. } => (cross_entropy_loss(&mut g, z, &targets)?, accuracy(&logits, ids)?),
        Labels::Tasks { bits, .. } => (binary_ce_loss(&mut g, z, &targets)?, binary_accuracy(&logits, bits)?),
    };
    Ok(Evaluation { loss: g.value(loss).item(), acc, logits })
}

fn check_compatible(model: &Model, ds: &Dataset, role: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::contract(format!("{role} set is empty")));
    }
    if ds.example_shape() != model.input_shape() {
        return Err(Error::dim(format!(
            "{role} examples have shape {:?}, the model expects {:?}",
            ds.example_shape(),
            model.input_shape()
        )));
    }
    let ok = match (model.head(), ds.labels()) {
        (Head::Softmax { classes }, Labels::Classes { classes: c, .. }) => classes == *c,
        (Head::Sigmoid { tasks }, Labels::Tasks { tasks: t, .. }) => tasks == *t,
        _ => false,
    };
    if !ok {
        return Err(Error::contract(format!("{role} labels do not match the {:?} head", model.head())));
    }
    Ok(())
}

fn batch_targets(ds: &Dataset, indices: &[usize], smoothing: Option<f64>) -> Result<Tensor> {
    let hard = ds.labels().targets(indices);
    match (smoothing, ds.labels()) {
        (None, _) => Ok(hard),
        (Some(a), Labels::Classes { classes, .. }) => smooth_labels(&hard, a, *classes),
        (Some(a), Labels::Tasks { .. }) => smooth_binary_labels(&hard, a),
    }
}

/// Trains a prepared copy of `model` and evaluates after every epoch:
/// train accuracy on the (possibly noisy) training labels, validation and
/// test metrics on their clean labels.
pub fn train(
    model: Model,
    train_ds: &Dataset,
    val_ds: &Dataset,
    test_ds: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    let mut record = RunRecord::new(config.fingerprint.clone(), config.seed);
    let fail = |error: Error, record: &RunRecord| TrainError { error, record: Box::new(record.clone()) };
    let setup = || -> Result<Model> {
        config.validate()?;
        check_compatible(&model, train_ds, "training")?;
        check_compatible(&model, val_ds, "validation")?;
        check_compatible(&model, test_ds, "test")?;
        prepare_model(model.clone(), config)
    };
    let mut model = setup().map_err(|e| fail(e, &record))?;

    let mut rng = Rng::seed_from_u64(config.seed);
    let mut optim = OptimState::new(config.adam);
    let smoothing = config.smoothing();
    let weight_decay = config.weight_decay();
    let prune = config.pruning();
    let mut stopper = config.early_stop().map(EarlyStopping::new);
    let mut best: Option<(Model, EpochMetrics, usize)> = None;
    let mut order: Vec<usize> = (0..train_ds.len()).collect();

    for epoch in 1..=config.epochs {
        if let Some(spec) = prune {
            if epoch == spec.warmup_epochs + 1 {
                model = prune_model(&model, &spec).map_err(|e| fail(e, &record))?;
                optim.reset();
                // checkpoints from before the prune have a different shape
                stopper = config.early_stop().map(EarlyStopping::new);
                best = None;
            }
        }

        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            // batch statistics need two examples
            if chunk.len() < 2 {
                continue;
            }
            let mut step = || -> Result<f64> {
                let targets = batch_targets(train_ds, chunk, smoothing)?;
                observer.on_batch(epoch, chunk, &targets);
                let mut g = Graph::new();
                let x = g.constant(train_ds.batch_features(chunk));
                let out = model.forward(&mut g, x, Phase::Train(&mut rng))?;
                let data_loss = match model.head() {
                    Head::Softmax { .. } => cross_entropy_loss(&mut g, out.logits, &targets)?,
                    Head::Sigmoid { .. } => binary_ce_loss(&mut g, out.logits, &targets)?,
                };
                let loss = match weight_decay {
                    Some(alpha) => {
                        let penalty = weight_decay_loss(&mut g, &out.weights(), alpha)?;
                        g.add(data_loss, penalty)?
                    }
                    None => data_loss,
                };
                let value = g.value(data_loss).item();
                if !g.value(loss).item().is_finite() {
                    return Err(Error::Training(format!("loss diverged at epoch {epoch}")));
                }
                g.backward(loss)?;
                let grads: Vec<Tensor> = out.params.iter().map(|p| g.grad_or_zeros(p.var)).collect();
                let names: Vec<String> = out.params.iter().map(|p| p.name.clone()).collect();
                adam_step(&mut model.params_mut(), &names, &grads, &mut optim)?;
                model.refresh_weight_scales();
                Ok(value)
            };
            let value = step().map_err(|e| fail(e, &record))?;
            loss_sum += value * chunk.len() as f64;
            seen += chunk.len();
        }

        let metrics = epoch_metrics(&model, train_ds, val_ds, test_ds, config.eval_batch, loss_sum / seen as f64)
            .map_err(|e| fail(e, &record))?;
        let row = EpochRow { epoch, metrics };
        observer.on_epoch(&row);
        record.rows.push(row.clone());

        if let Some(stopper) = &mut stopper {
            let metric = match config.early_stop().map(|c| c.metric) {
                Some(crate::regularization::StopMetric::ValAccuracy) => row.metrics.val_acc,
                _ => row.metrics.val_loss,
            };
            let decision = stopper.step(metric).map_err(|e| fail(e, &record))?;
            if stopper.improved_last() {
                best = Some((model.clone(), row.metrics.clone(), epoch));
            }
            if decision == StopDecision::Stop {
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((best_model, metrics, epoch)) => {
            model = best_model;
            record.final_metrics = Some(metrics);
            Some(epoch)
        }
        None => {
            record.final_metrics = record.rows.last().map(|r| r.metrics.clone());
            None
        }
    };
    Ok(TrainOutcome { model, record, best_epoch })
}

fn epoch_metrics(
    model: &Model,
    train_ds: &Dataset,
    val_ds: &Dataset,
    test_ds: &Dataset,
    batch: usize,
    train_loss: f64,
) -> Result<EpochMetrics> {
    if !train_loss.is_finite() {
        return Err(Error::Training("training loss is not finite".into()));
    }
    let train_eval = evaluate(model, train_ds, batch)?;
    let val = evaluate(model, val_ds, batch)?;
    let test = evaluate(model, test_ds, batch)?;
    if !val.loss.is_finite() {
        return Err(Error::Training("validation loss is not finite".into()));
    }
    let f1 = match test_ds.labels() {
        Labels::Tasks { bits, tasks } => Some(f1_per_task(&test.logits, bits, *tasks)?),
        Labels::Classes { .. } => None,
    };
    Ok(EpochMetrics {
        train_loss,
        val_loss: val.loss,
        train_acc: train_eval.acc,
        val_acc: val.acc,
        test_acc: test.acc,
        f1,
    })
}

/// Independent seed for one purpose (init, shuffling, noise, split, data)
/// of a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
