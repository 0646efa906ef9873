//! Symmetric fake quantization for quantization-aware training.
//!
//! Values are mapped onto the signed grid `[-q, q]` with `q = 2^(b-1) - 1`,
//! rounded half away from zero, clamped, and mapped back to reals. Weights
//! use one scale per output channel (the channel's max `|W|`); layer inputs
//! use a scalar scale tracked as an exponential moving average of the batch
//! max `|X|`. In the graph, both quantizers are straight-through nodes: the
//! rounding is invisible to backpropagation and scales are constants.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Layer, Model};
use crate::tensor::Tensor;

/// Floor applied to every scale so dead channels never divide by zero.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Bits for the first parametric layer and the head layer.
    pub boundary_bits: u32,
    pub ema_momentum: f64,
    pub enabled: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig { weight_bits: 4, act_bits: 4, boundary_bits: 8, ema_momentum: 0.99, enabled: true }
    }
}

impl QuantConfig {
    pub fn new(weight_bits: u32, act_bits: u32) -> Self {
        QuantConfig { weight_bits, act_bits, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, bits) in
            [("weight_bits", self.weight_bits), ("act_bits", self.act_bits), ("boundary_bits", self.boundary_bits)]
        {
            check_bits(bits).map_err(|_| Error::contract(format!("{name} = {bits} outside [2, 16]")))?;
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::contract(format!("ema_momentum = {} outside (0, 1)", self.ema_momentum)));
        }
        Ok(())
    }

    /// `W4/A8`-style label.
    pub fn label(&self) -> String {
        format!("W{}/A{}", self.weight_bits, self.act_bits)
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if (2..=16).contains(&bits) {
        Ok(())
    } else {
        Err(Error::contract(format!("bit width {bits} outside [2, 16]")))
    }
}

/// Largest grid index `q = 2^(b-1) - 1`.
pub fn grid_max(bits: u32) -> f64 {
    ((1u32 << (bits - 1)) - 1) as f64
}

#[derive(Clone, Copy, Debug)]
pub enum Scale<'a> {
    PerTensor(f64),
    /// One scale per slice along axis 0.
    PerChannel(&'a [f64]),
}

#[inline]
fn quantize_value(v: f64, q: f64, scale: f64) -> f64 {
    // f64::round rounds half away from zero, which keeps the map odd-symmetric.
    let k = (v * q / scale).round().clamp(-q, q);
    k * scale / q
}

/// Quantize-dequantize: `clamp(round(x·q/λ), −q, q)·λ/q`.
pub fn fake_quantize(x: &Tensor, bits: u32, scale: Scale<'_>) -> Result<Tensor> {
    check_bits(bits)?;
    let q = grid_max(bits);
    match scale {
        Scale::PerTensor(lambda) => {
            check_scale(lambda)?;
            Ok(x.map(|v| quantize_value(v, q, lambda)))
        }
        Scale::PerChannel(scales) => {
            if scales.len() != x.rows() {
                return Err(Error::contract(format!(
                    "{} channel scales for a tensor with {} channels",
                    scales.len(),
                    x.rows()
                )));
            }
            scales.iter().try_for_each(|&s| check_scale(s))?;
            let per = x.numel() / x.rows();
            let mut out = x.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v = quantize_value(*v, q, scales[i / per]);
            }
            Ok(out)
        }
    }
}

fn check_scale(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!("quantization scale must be positive and finite, got {s}")))
    }
}

/// Per-output-channel `max |W|`, floored at [`MIN_SCALE`].
pub fn weight_scales(w: &Tensor) -> Vec<f64> {
    (0..w.rows()).map(|f| w.row(f).iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(MIN_SCALE)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantState {
    /// Last per-channel weight scales seen in a training forward.
    pub weight_scale: Vec<f64>,
    /// Running activation scale used at inference.
    pub act_scale: f64,
    pub calibrated: bool,
}

impl Default for QuantState {
    fn default() -> Self {
        QuantState { weight_scale: Vec::new(), act_scale: 1.0, calibrated: false }
    }
}

/// Folds one training batch into the activation scale. The first batch sets
/// the scale outright; later ones update it as an EMA with momentum `m`.
pub fn act_scale_update(state: &QuantState, batch: &Tensor, momentum: f64) -> QuantState {
    let batch_max = batch.max_abs().max(MIN_SCALE);
    let act_scale =
        if state.calibrated { momentum * state.act_scale + (1.0 - momentum) * batch_max } else { batch_max };
    QuantState { weight_scale: state.weight_scale.clone(), act_scale: act_scale.max(MIN_SCALE), calibrated: true }
}

/// Quantization attached to one parametric layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerQuant {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub ema_momentum: f64,
    pub enabled: bool,
    pub state: QuantState,
}

impl LayerQuant {
    pub fn label(&self) -> String {
        format!("W{}/A{}", self.weight_bits, self.act_bits)
    }
}

/// Operands of a quantized layer, plus the activation state to commit after a
/// successful training step.
pub struct QuantizedOperands {
    pub input: Var,
    pub weight: Var,
    pub next_state: Option<QuantState>,
}

/// Fake-quantizes a layer's input and weight as straight-through nodes.
///
/// In training the activation scale is updated from this batch before it is
/// used. In eval the frozen scale is used; an uncalibrated layer leaves its
/// input unquantized.
pub fn quantize_operands(
    g: &mut Graph,
    input: Var,
    weight: Var,
    quant: &LayerQuant,
    train: bool,
) -> Result<QuantizedOperands> {
    let scales = weight_scales(g.value(weight));
    let wq = g.custom_grad(weight, |w| fake_quantize(w, quant.weight_bits, Scale::PerChannel(&scales)))?;

    let (act_scale, next_state) = if train {
        let mut next = act_scale_update(&quant.state, g.value(input), quant.ema_momentum);
        next.weight_scale = scales;
        (Some(next.act_scale), Some(next))
    } else if quant.state.calibrated {
        (Some(quant.state.act_scale), None)
    } else {
        (None, None)
    };
    let xq = match act_scale {
        Some(s) => g.custom_grad(input, |x| fake_quantize(x, quant.act_bits, Scale::PerTensor(s)))?,
        None => input,
    };
    Ok(QuantizedOperands { input: xq, weight: wq, next_state })
}

/// Forward of a single quantized dense or conv layer outside a model; the
/// updated activation state is written back in train mode.
pub fn quantize_layer_forward(g: &mut Graph, layer: &mut Layer, x: Var, train: bool) -> Result<Var> {
    if !layer.is_parametric() {
        return Err(Error::contract("only dense and conv layers are quantized"));
    }
    if !layer.quant().is_some_and(|q| q.enabled) {
        return Err(Error::contract("layer has no enabled quantizer"));
    }
    let mut params = Vec::new();
    let (y, next) = layer.forward_parametric(g, x, train, "layer", &mut params)?;
    if let (Some(state), Some(q)) = (next, layer.quant_mut()) {
        q.state = state;
    }
    Ok(y)
}

/// Attaches quantizers to every dense and conv layer: `(weight_bits,
/// act_bits)` in the interior, `boundary_bits` on the first parametric layer
/// and on the head layer. Biases stay in full precision.
pub fn wrap_model(mut model: Model, cfg: &QuantConfig) -> Result<Model> {
    cfg.validate()?;
    let parametric: Vec<usize> =
        model.layers().iter().enumerate().filter(|(_, l)| l.is_parametric()).map(|(i, _)| i).collect();
    let (Some(&first), Some(&last)) = (parametric.first(), parametric.last()) else {
        return Err(Error::contract("model has no parametric layer to quantize"));
    };
    for &i in &parametric {
        let boundary = i == first || i == last;
        let (wb, ab) = if boundary { (cfg.boundary_bits, cfg.boundary_bits) } else { (cfg.weight_bits, cfg.act_bits) };
        let quant = LayerQuant {
            weight_bits: wb,
            act_bits: ab,
            ema_momentum: cfg.ema_momentum,
            enabled: cfg.enabled,
            state: QuantState::default(),
        };
        match &mut model.layers_mut()[i] {
            Layer::Dense(d) => d.quant = Some(quant),
            Layer::Conv2d(c) => c.quant = Some(quant),
            _ => unreachable!("filtered to parametric layers"),
        }
    }
    Ok(model)
}
