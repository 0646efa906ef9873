use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::layer::{BatchNorm, Conv2d, Dense, Layer, NormRole};
use crate::nn::model::{Head, Model};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// One dense layer straight to the head.
    Linear,
    /// `D → 256 → 128 → out` with ReLU.
    MlpSmall,
    /// Two conv blocks (conv, batch norm, ReLU) and two dense layers.
    CnnSmall,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Linear => "linear",
            Preset::MlpSmall => "mlp-small",
            Preset::CnnSmall => "cnn-small",
        }
    }

    pub fn default_hidden(self) -> Vec<usize> {
        match self {
            Preset::Linear => vec![],
            Preset::MlpSmall => vec![256, 128],
            Preset::CnnSmall => vec![64],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Preset::Linear),
            "mlp-small" => Ok(Preset::MlpSmall),
            "cnn-small" => Ok(Preset::CnnSmall),
            other => Err(Error::contract(format!(
                "unknown model preset {other:?} (expected linear, mlp-small or cnn-small)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub preset: Preset,
    /// Per-example input shape.
    pub input_shape: Vec<usize>,
    pub head: Head,
    /// Hidden dense widths; the preset default when `None`.
    pub hidden: Option<Vec<usize>>,
    /// Trunk batch norm in the conv blocks.
    pub batchnorm: bool,
}

impl ModelSpec {
    pub fn new(preset: Preset, input_shape: Vec<usize>, head: Head) -> Self {
        ModelSpec { preset, input_shape, head, hidden: None, batchnorm: true }
    }
}

/// Builds a freshly initialized model. Multi-task heads get one batch norm
/// per task logit.
pub fn build_model(spec: &ModelSpec, rng: &mut Rng) -> Result<Model> {
    let hidden = spec.hidden.clone().unwrap_or_else(|| spec.preset.default_hidden());
    if hidden.contains(&0) {
        return Err(Error::contract("hidden widths must be positive"));
    }
    let outputs = spec.head.outputs();
    let mut layers = Vec::new();
    let mut features = match spec.preset {
        Preset::Linear | Preset::MlpSmall => {
            if spec.input_shape.len() > 1 {
                layers.push(Layer::Flatten);
            }
            spec.input_shape.iter().product()
        }
        Preset::CnnSmall => {
            let &[c, h, w] = spec.input_shape.as_slice() else {
                return Err(Error::dim(format!("cnn-small expects [C×H×W] inputs, got {:?}", spec.input_shape)));
            };
            let blocks = [(c, 16, 1), (16, 32, 2)];
            let (mut h, mut w) = (h, w);
            for (cin, cout, stride) in blocks {
                layers.push(Layer::Conv2d(Conv2d::new(cin, cout, 3, stride, 1, !spec.batchnorm, rng)));
                if spec.batchnorm {
                    layers.push(Layer::BatchNorm(BatchNorm::new(cout, NormRole::Trunk)));
                }
                layers.push(Layer::Relu);
                h = (h + 2 - 3) / stride + 1;
                w = (w + 2 - 3) / stride + 1;
            }
            layers.push(Layer::Flatten);
            32 * h * w
        }
    };
    if spec.preset == Preset::Linear && !hidden.is_empty() {
        return Err(Error::contract("the linear preset has no hidden layers"));
    }
    for &width in &hidden {
        layers.push(Layer::Dense(Dense::new(features, width, rng)));
        layers.push(Layer::Relu);
        features = width;
    }
    layers.push(Layer::Dense(Dense::new(features, outputs, rng)));
    if let Head::Sigmoid { tasks } = spec.head {
        layers.push(Layer::BatchNorm(BatchNorm::new(tasks, NormRole::Task)));
    }
    Model::new(spec.input_shape.clone(), layers, spec.head)
}
