use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::layer::{Dropout, Layer, NormRole, ParamKind, ParamVar, StatUpdate, TrainCtx};
use crate::quant::weight_scales;
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Single-task classification over `classes` with a softmax.
    Softmax { classes: usize },
    /// Multi-task binary detection, one sigmoid per task.
    Sigmoid { tasks: usize },
}

impl Head {
    pub fn outputs(&self) -> usize {
        match *self {
            Head::Softmax { classes } => classes,
            Head::Sigmoid { tasks } => tasks,
        }
    }
}

pub enum Phase<'a> {
    Train(&'a mut Rng),
    Eval,
}

/// Where dropout sits relative to the hidden dense activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutPosition {
    /// After every hidden dense activation.
    Hidden,
    /// Only after the last hidden activation, right before the head.
    Last,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Graph leaves of every trainable tensor, in [`Model::params_mut`] order.
    pub params: Vec<ParamVar>,
}

impl ForwardOutput {
    pub fn weights(&self) -> Vec<Var> {
        self.params.iter().filter(|p| p.kind == ParamKind::Weight).map(|p| p.var).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    head: Head,
}

impl Model {
    /// `input_shape` is the per-example shape (without the batch axis).
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, head: Head) -> Result<Self> {
        let model = Model { input_shape, layers, head };
        model.validate()?;
        Ok(model)
    }

    /// Checks that layer shapes chain and that the last layer feeds the head.
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| Error::dim(format!("layer {i} ({}): {e}", layer.kind())))?;
        }
        if shape != [self.head.outputs()] {
            return Err(Error::dim(format!(
                "model output shape {shape:?} does not match head with {} outputs",
                self.head.outputs()
            )));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut Vec<Layer> {
        &mut self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    /// Number of independent per-task normalizations in a multi-task head.
    pub fn task_norm_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) if bn.role == NormRole::Task => Some(bn.features()),
                _ => None,
            })
            .sum()
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let shape = g.shape(x);
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "input {shape:?} does not match model input [N, {}]",
                self.input_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(())
    }

    /// Logits for a batch. In [`Phase::Train`], dropout samples masks from
    /// the given RNG and batch-norm / activation-scale statistics are updated.
    pub fn forward(&mut self, g: &mut Graph, x: Var, phase: Phase<'_>) -> Result<ForwardOutput> {
        match phase {
            Phase::Eval => self.forward_eval(g, x),
            Phase::Train(rng) => {
                self.check_input(g, x)?;
                let mut ctx = TrainCtx { rng, updates: Vec::new() };
                let mut params = Vec::new();
                let mut h = x;
                for (i, layer) in self.layers.iter().enumerate() {
                    h = layer.forward(i, g, h, Some(&mut ctx), &mut params)?;
                }
                for update in ctx.updates {
                    self.apply(update);
                }
                Ok(ForwardOutput { logits: h, params })
            }
        }
    }

    fn apply(&mut self, update: StatUpdate) {
        match update {
            StatUpdate::Norm { layer, mean, var } => {
                if let Layer::BatchNorm(bn) = &mut self.layers[layer] {
                    bn.running_mean = mean;
                    bn.running_var = var;
                }
            }
            StatUpdate::Quant { layer, state } => {
                if let Some(q) = self.layers[layer].quant_mut() {
                    q.state = state;
                }
            }
        }
    }

    /// Eval-mode forward; a pure function of weights, statistics and input.
    pub fn forward_eval(&self, g: &mut Graph, x: Var) -> Result<ForwardOutput> {
        self.check_input(g, x)?;
        let mut params = Vec::new();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(i, g, h, None, &mut params)?;
        }
        Ok(ForwardOutput { logits: h, params })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward_eval(&mut g, xv)?;
        Ok(g.value(out.logits).clone())
    }

    /// Eval-mode logits computed `batch` examples at a time.
    pub fn predict_batched(&self, x: &Tensor, batch: usize) -> Result<Tensor> {
        let n = x.rows();
        let per = x.numel() / n;
        let mut data = Vec::with_capacity(n * self.head.outputs());
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, x.data()[start * per..end * per].to_vec())?;
            data.extend(self.predict(&chunk)?.into_data());
            start = end;
        }
        Tensor::new(vec![n, self.head.outputs()], data)
    }

    /// Trainable tensors with their names, in forward order.
    pub fn named_params(&self) -> Vec<(String, &Tensor, ParamKind)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    out.push((format!("layers.{i}.weight"), &d.weight, ParamKind::Weight));
                    out.push((format!("layers.{i}.bias"), &d.bias, ParamKind::Bias));
                }
                Layer::Conv2d(c) => {
                    out.push((format!("layers.{i}.weight"), &c.weight, ParamKind::Weight));
                    if let Some(b) = &c.bias {
                        out.push((format!("layers.{i}.bias"), b, ParamKind::Bias));
                    }
                }
                Layer::BatchNorm(bn) => {
                    out.push((format!("layers.{i}.gamma"), &bn.gamma, ParamKind::Norm));
                    out.push((format!("layers.{i}.beta"), &bn.beta, ParamKind::Norm));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable trainable tensors in the same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                Layer::Conv2d(c) => {
                    out.push(&mut c.weight);
                    if let Some(b) = &mut c.bias {
                        out.push(b);
                    }
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t, _)| t.numel()).sum()
    }

    /// Parameters plus buffers (running statistics, quantization scales).
    pub fn state_dict(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.named_params().into_iter().map(|(n, t, _)| (n, t.clone())).collect();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(bn) = layer {
                out.push((format!("layers.{i}.running_mean"), Tensor::vector(bn.running_mean.clone())));
                out.push((format!("layers.{i}.running_var"), Tensor::vector(bn.running_var.clone())));
            }
            if let (Some(q), Layer::Dense(crate::nn::Dense { weight, .. }))
            | (Some(q), Layer::Conv2d(crate::nn::Conv2d { weight, .. })) = (layer.quant(), layer)
            {
                out.push((format!("layers.{i}.weight_scale"), Tensor::vector(weight_scales(weight))));
                out.push((format!("layers.{i}.act_scale"), Tensor::scalar(q.state.act_scale)));
                out.push((
                    format!("layers.{i}.act_calibrated"),
                    Tensor::scalar(if q.state.calibrated { 1.0 } else { 0.0 }),
                ));
            }
        }
        out
    }

    /// Loads tensors produced by [`Model::state_dict`]. Every entry the
    /// model expects must be present with a matching rank; shapes may differ
    /// (a pruned checkpoint), as long as the result validates.
    pub fn load_state(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let lookup = |name: &str| -> Result<Tensor> {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Data(format!("checkpoint is missing {name}")))
        };
        let mut next = self.clone();
        for (i, layer) in next.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            match layer {
                Layer::Dense(d) => {
                    d.weight = same_rank(lookup(&format!("{p}.weight"))?, &d.weight)?;
                    d.bias = same_rank(lookup(&format!("{p}.bias"))?, &d.bias)?;
                }
                Layer::Conv2d(c) => {
                    c.weight = same_rank(lookup(&format!("{p}.weight"))?, &c.weight)?;
                    if let Some(b) = &mut c.bias {
                        *b = same_rank(lookup(&format!("{p}.bias"))?, b)?;
                    }
                }
                Layer::BatchNorm(bn) => {
                    bn.gamma = same_rank(lookup(&format!("{p}.gamma"))?, &bn.gamma)?;
                    bn.beta = same_rank(lookup(&format!("{p}.beta"))?, &bn.beta)?;
                    bn.running_mean = lookup(&format!("{p}.running_mean"))?.into_data();
                    bn.running_var = lookup(&format!("{p}.running_var"))?.into_data();
                    if bn.running_mean.len() != bn.features() || bn.running_var.len() != bn.features() {
                        return Err(Error::Data(format!("{p}: running statistics do not match gamma")));
                    }
                }
                _ => {}
            }
            if let Some(q) = layer.quant_mut() {
                q.state.act_scale = lookup(&format!("{p}.act_scale"))?.item();
                q.state.calibrated = lookup(&format!("{p}.act_calibrated"))?.item() != 0.0;
                q.state.weight_scale = lookup(&format!("{p}.weight_scale"))?.into_data();
            }
        }
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Inserts dropout after hidden dense activations.
    pub fn insert_dropout(&mut self, p: f64, position: DropoutPosition) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout probability {p} outside [0, 1)")));
        }
        let last_dense = self.layers.iter().rposition(|l| matches!(l, Layer::Dense(_)));
        let mut sites: Vec<usize> = self
            .layers
            .windows(2)
            .enumerate()
            .filter(|(i, w)| matches!(w, [Layer::Dense(_), Layer::Relu]) && Some(*i) != last_dense)
            .map(|(i, _)| i + 2)
            .collect();
        if position == DropoutPosition::Last {
            sites = sites.last().copied().into_iter().collect();
        }
        for &site in sites.iter().rev() {
            self.layers.insert(site, Layer::Dropout(Dropout { p }));
        }
        Ok(())
    }

    /// Removes trunk batch norms; conv layers that relied on them for a
    /// shift get a zero bias. Per-task head normalization is kept.
    pub fn strip_batchnorm(&mut self) {
        self.layers.retain(|l| !matches!(l, Layer::BatchNorm(bn) if bn.role == NormRole::Trunk));
        for layer in &mut self.layers {
            if let Layer::Conv2d(c) = layer {
                if c.bias.is_none() {
                    c.bias = Some(Tensor::zeros(vec![c.filters()]));
                }
            }
        }
    }

    /// Recomputes every quantized layer's per-channel weight scales from its
    /// current weights.
    pub fn refresh_weight_scales(&mut self) {
        for layer in &mut self.layers {
            let (weight, quant) = match layer {
                Layer::Dense(d) => (&d.weight, &mut d.quant),
                Layer::Conv2d(c) => (&c.weight, &mut c.quant),
                _ => continue,
            };
            if let Some(q) = quant {
                q.state.weight_scale = weight_scales(weight);
            }
        }
    }

    pub fn set_quant_enabled(&mut self, enabled: bool) {
        for layer in &mut self.layers {
            if let Some(q) = layer.quant_mut() {
                q.enabled = enabled;
            }
        }
    }

    /// `W/A` label of every quantized layer, in order.
    pub fn quant_labels(&self) -> Vec<String> {
        self.layers.iter().filter_map(|l| l.quant().map(|q| q.label())).collect()
    }
}

fn same_rank(t: Tensor, like: &Tensor) -> Result<Tensor> {
    if t.rank() != like.rank() {
        return Err(Error::Data(format!(
            "checkpoint tensor {:?} has a different rank than {:?}",
            t.shape(),
            like.shape()
        )));
    }
    Ok(t)
}
