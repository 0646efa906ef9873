use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::quant::{quantize_operands, LayerQuant, QuantState};
use crate::tensor::Tensor;
use crate::Rng;

/// One standard-normal draw.
pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Role of a graph leaf created for a model parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Dense or conv weight; the only kind weight decay touches.
    Weight,
    Bias,
    /// Batch-norm scale or shift.
    Norm,
}

#[derive(Clone, Debug)]
pub struct ParamVar {
    pub name: String,
    pub var: Var,
    pub kind: ParamKind,
}

/// Fully connected layer, `y = x·Wᵀ + b` with `W` stored `[out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub quant: Option<LayerQuant>,
}

impl Dense {
    /// He-normal weights, zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| std * normal(rng)).collect();
        Dense {
            weight: Tensor::new(vec![outputs, inputs], data).expect("dense shape"),
            bias: Tensor::zeros(vec![outputs]),
            quant: None,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = weight.matrix_dims()?;
        if bias.shape() != [out] {
            return Err(Error::dim(format!("bias {:?} does not match weight {:?}", bias.shape(), weight.shape())));
        }
        Ok(Dense { weight, bias, quant: None })
    }

    pub fn inputs(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn outputs(&self) -> usize {
        self.weight.dim(0)
    }
}

/// 2-d convolution with `[F × C × kh × kw]` filters.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub quant: Option<LayerQuant>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..filters * fan_in).map(|_| std * normal(rng)).collect();
        Conv2d {
            weight: Tensor::new(vec![filters, in_channels, kernel, kernel], data).expect("conv shape"),
            bias: bias.then(|| Tensor::zeros(vec![filters])),
            stride,
            padding,
            quant: None,
        }
    }

    pub fn filters(&self) -> usize {
        self.weight.dim(0)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let &[c, h, w] = input else {
            return Err(Error::dim(format!("conv2d expects [C×H×W] examples, got {input:?}")));
        };
        let ws = self.weight.shape();
        if ws[1] != c {
            return Err(Error::dim(format!("conv2d kernel {ws:?} does not accept {c} channels")));
        }
        let p = self.padding;
        if ws[2] > h + 2 * p || ws[3] > w + 2 * p {
            return Err(Error::dim(format!("conv2d kernel {ws:?} larger than padded input {input:?}")));
        }
        Ok(vec![ws[0], (h + 2 * p - ws[2]) / self.stride + 1, (w + 2 * p - ws[3]) / self.stride + 1])
    }
}

/// Whether a batch norm belongs to the shared trunk or is the per-task
/// normalization of a multi-task head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormRole {
    Trunk,
    Task,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub role: NormRole,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new(features: usize, role: NormRole) -> Self {
        BatchNorm {
            gamma: Tensor::ones(vec![features]),
            beta: Tensor::zeros(vec![features]),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            role,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.numel()
    }

    /// Keeps only the listed channels.
    pub fn select(&mut self, keep: &[usize]) {
        self.gamma = self.gamma.select_rows(keep);
        self.beta = self.beta.select_rows(keep);
        self.running_mean = keep.iter().map(|&i| self.running_mean[i]).collect();
        self.running_var = keep.iter().map(|&i| self.running_var[i]).collect();
    }
}

/// `running ← momentum·running + (1 − momentum)·batch`
pub fn ema(running: &[f64], batch: &[f64], momentum: f64) -> Vec<f64> {
    running.iter().zip(batch).map(|(r, b)| momentum * r + (1.0 - momentum) * b).collect()
}

/// Batch normalization over axis 1. In train mode the batch statistics are
/// used and folded into the running statistics; in eval mode the running
/// statistics are used unchanged.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &mut Vec<f64>,
    running_var: &mut Vec<f64>,
    momentum: f64,
    eps: f64,
    train: bool,
) -> Result<Var> {
    if train {
        let (y, mean, var) = g.batch_norm_train(x, gamma, beta, eps)?;
        *running_mean = ema(running_mean, &mean, momentum);
        *running_var = ema(running_var, &var, momentum);
        Ok(y)
    } else {
        g.batch_norm_eval(x, gamma, beta, running_mean, running_var, eps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dropout {
    pub p: f64,
}

/// Inverted dropout: survivors are scaled by `1/(1−p)` in training so the
/// eval path is the identity.
pub fn dropout_forward(g: &mut Graph, x: Var, p: f64, train: bool, rng: &mut Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::contract(format!("dropout probability {p} outside [0, 1)")));
    }
    if !train || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.shape(x).to_vec();
    let numel: usize = shape.iter().product();
    let mask = (0..numel).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    let mask = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, mask)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    Flatten,
    Dropout(Dropout),
}

/// Training-time side effects collected during a forward pass and applied
/// once the pass has succeeded.
pub(crate) enum StatUpdate {
    Norm { layer: usize, mean: Vec<f64>, var: Vec<f64> },
    Quant { layer: usize, state: QuantState },
}

pub(crate) struct TrainCtx<'a> {
    pub rng: &'a mut Rng,
    pub updates: Vec<StatUpdate>,
}

impl Layer {
    pub fn is_parametric(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Dropout(_) => "dropout",
        }
    }

    pub fn quant(&self) -> Option<&LayerQuant> {
        match self {
            Layer::Dense(d) => d.quant.as_ref(),
            Layer::Conv2d(c) => c.quant.as_ref(),
            _ => None,
        }
    }

    pub fn quant_mut(&mut self) -> Option<&mut LayerQuant> {
        match self {
            Layer::Dense(d) => d.quant.as_mut(),
            Layer::Conv2d(c) => c.quant.as_mut(),
            _ => None,
        }
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                if input != [d.inputs()] {
                    return Err(Error::dim(format!(
                        "dense layer expects {} features, got shape {input:?}",
                        d.inputs()
                    )));
                }
                Ok(vec![d.outputs()])
            }
            Layer::Conv2d(c) => c.output_shape(input),
            Layer::BatchNorm(bn) => {
                if input.first() != Some(&bn.features()) {
                    return Err(Error::dim(format!("batch norm over {} channels got shape {input:?}", bn.features())));
                }
                Ok(input.to_vec())
            }
            Layer::Relu | Layer::Dropout(_) => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Forward of a dense or conv layer. Returns the output and, when
    /// training a quantized layer, its next activation-scale state.
    pub fn forward_parametric(
        &self,
        g: &mut Graph,
        x: Var,
        train: bool,
        prefix: &str,
        params: &mut Vec<ParamVar>,
    ) -> Result<(Var, Option<QuantState>)> {
        let (weight, bias, quant) = match self {
            Layer::Dense(d) => (&d.weight, Some(&d.bias), &d.quant),
            Layer::Conv2d(c) => (&c.weight, c.bias.as_ref(), &c.quant),
            _ => return Err(Error::contract(format!("{} layer has no weights", self.kind()))),
        };
        let w = g.param(weight.clone());
        params.push(ParamVar { name: format!("{prefix}.weight"), var: w, kind: ParamKind::Weight });
        let b = bias.map(|b| {
            let v = g.param(b.clone());
            params.push(ParamVar { name: format!("{prefix}.bias"), var: v, kind: ParamKind::Bias });
            v
        });

        let (x, w, next) = match quant {
            Some(q) if q.enabled => {
                let ops = quantize_operands(g, x, w, q, train)?;
                (ops.input, ops.weight, ops.next_state)
            }
            _ => (x, w, None),
        };

        let y = match self {
            Layer::Dense(_) => {
                let y = g.matmul_t(x, w)?;
                match b {
                    Some(b) => g.add(y, b)?,
                    None => y,
                }
            }
            Layer::Conv2d(c) => {
                let y = g.conv2d(x, w, c.stride, c.padding)?;
                match b {
                    Some(b) => g.channel_bias(y, b)?,
                    None => y,
                }
            }
            _ => unreachable!(),
        };
        Ok((y, next))
    }

    pub(crate) fn forward(
        &self,
        index: usize,
        g: &mut Graph,
        x: Var,
        ctx: Option<&mut TrainCtx<'_>>,
        params: &mut Vec<ParamVar>,
    ) -> Result<Var> {
        let prefix = format!("layers.{index}");
        let train = ctx.is_some();
        match self {
            Layer::Dense(_) | Layer::Conv2d(_) => {
                let (y, next) = self.forward_parametric(g, x, train, &prefix, params)?;
                if let (Some(ctx), Some(state)) = (ctx, next) {
                    ctx.updates.push(StatUpdate::Quant { layer: index, state });
                }
                Ok(y)
            }
            Layer::BatchNorm(bn) => {
                let gamma = g.param(bn.gamma.clone());
                let beta = g.param(bn.beta.clone());
                params.push(ParamVar { name: format!("{prefix}.gamma"), var: gamma, kind: ParamKind::Norm });
                params.push(ParamVar { name: format!("{prefix}.beta"), var: beta, kind: ParamKind::Norm });
                match ctx {
                    Some(ctx) => {
                        let (y, mean, var) = g.batch_norm_train(x, gamma, beta, bn.eps)?;
                        ctx.updates.push(StatUpdate::Norm {
                            layer: index,
                            mean: ema(&bn.running_mean, &mean, bn.momentum),
                            var: ema(&bn.running_var, &var, bn.momentum),
                        });
                        Ok(y)
                    }
                    None => g.batch_norm_eval(x, gamma, beta, &bn.running_mean, &bn.running_var, bn.eps),
                }
            }
            Layer::Relu => g.relu(x),
            Layer::Flatten => g.flatten(x),
            Layer::Dropout(d) => match ctx {
                Some(ctx) => dropout_forward(g, x, d.p, true, ctx.rng),
                None => Ok(x),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn normalized_columns_pass_through() {
        // columns with mean 0 and (biased) variance 1
        let x = Tensor::from_rows(&[[1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [-1.0, -1.0]]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(Tensor::ones(vec![2]));
        let beta = g.constant(Tensor::zeros(vec![2]));
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let y = batchnorm_forward(&mut g, xv, gamma, beta, &mut rm, &mut rv, 0.9, 1e-5, true).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_gamma_collapses_to_beta() {
        let x = Tensor::from_rows(&[[3.0, -1.0], [0.5, 7.0], [2.0, 2.0]]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::zeros(vec![2]));
        let beta = g.constant(Tensor::full(vec![2], 5.0));
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let y = batchnorm_forward(&mut g, xv, gamma, beta, &mut rm, &mut rv, 0.9, 1e-5, true).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn single_example_batch_norm_in_training_is_rejected() {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::ones(vec![1, 2]));
        let gamma = g.constant(Tensor::ones(vec![2]));
        let beta = g.constant(Tensor::zeros(vec![2]));
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let r = batchnorm_forward(&mut g, xv, gamma, beta, &mut rm, &mut rv, 0.9, 1e-5, true);
        assert!(matches!(r, Err(Error::Contract(_))));
        assert!(batchnorm_forward(&mut g, xv, gamma, beta, &mut rm, &mut rv, 0.9, 1e-5, false).is_ok());
    }

    #[test]
    fn running_statistics_follow_a_scripted_ema() {
        let mut rng = Rng::seed_from_u64(3);
        let batches: Vec<Tensor> = (0..5)
            .map(|k| {
                let data = (0..8 * 3).map(|_| k as f64 + 2.0 * normal(&mut rng)).collect();
                Tensor::new(vec![8, 3], data).unwrap()
            })
            .collect();
        let (mut rm, mut rv) = (vec![0.0; 3], vec![1.0; 3]);
        for b in &batches {
            let mut g = Graph::new();
            let xv = g.constant(b.clone());
            let gamma = g.constant(Tensor::ones(vec![3]));
            let beta = g.constant(Tensor::zeros(vec![3]));
            batchnorm_forward(&mut g, xv, gamma, beta, &mut rm, &mut rv, 0.9, 1e-5, true).unwrap();
        }

        // independent recomputation, column by column
        let (mut em, mut ev) = (vec![0.0; 3], vec![1.0; 3]);
        for b in &batches {
            for c in 0..3 {
                let col: Vec<f64> = (0..8).map(|i| b.data()[i * 3 + c]).collect();
                let mu = col.iter().sum::<f64>() / 8.0;
                let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
                em[c] = 0.9 * em[c] + 0.1 * mu;
                ev[c] = 0.9 * ev[c] + 0.1 * var;
            }
        }
        for c in 0..3 {
            assert!((rm[c] - em[c]).abs() < 1e-12);
            assert!((rv[c] - ev[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![4, 4], 2.5));
        assert_eq!(dropout_forward(&mut g, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout_forward(&mut g, x, 0.7, false, &mut rng).unwrap(), x);
        assert!(matches!(dropout_forward(&mut g, x, 1.0, true, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_preserves_the_mean() {
        let mut rng = Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![100_000]));
        let y = dropout_forward(&mut g, x, 0.1, true, &mut rng).unwrap();
        let mean = g.value(y).sum() / 100_000.0;
        assert!((0.99..=1.01).contains(&mean), "{mean}");
    }
}
