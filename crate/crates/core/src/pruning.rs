//! One-shot structured magnitude pruning.
//!
//! Every hidden dense layer and conv layer loses `⌊ratio·F⌋` output neurons
//! (rows / filters), chosen by the L1 norm of their weight slice. The layer
//! is rebuilt smaller, along with any batch norm that follows it and the
//! input dimension of the next parametric layer. The head is never pruned.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Layer, Model};
use crate::quant::weight_scales;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneCriterion {
    /// Drop the smallest-norm neurons (magnitude pruning).
    Lowest,
    /// Drop the largest-norm neurons; kept for ablation.
    Highest,
}

impl fmt::Display for PruneCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneCriterion::Lowest => "lowest",
            PruneCriterion::Highest => "highest",
        })
    }
}

impl FromStr for PruneCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lowest" => Ok(PruneCriterion::Lowest),
            "highest" => Ok(PruneCriterion::Highest),
            other => Err(Error::contract(format!("unknown prune criterion {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneSpec {
    pub ratio: f64,
    pub criterion: PruneCriterion,
    /// Epochs of training before the one-shot prune.
    pub warmup_epochs: usize,
}

impl PruneSpec {
    pub fn new(ratio: f64) -> Self {
        PruneSpec { ratio, criterion: PruneCriterion::Lowest, warmup_epochs: 0 }
    }
}

/// L1 norm of each output neuron's weight slice.
pub fn neuron_norms(w: &Tensor) -> Vec<f64> {
    (0..w.rows()).map(|f| w.row(f).iter().map(|v| v.abs()).sum()).collect()
}

/// Indices (ascending) of the `count` neurons to remove; ties go to the
/// lower index.
pub fn select_pruned(norms: &[f64], count: usize, criterion: PruneCriterion) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| {
        let by_norm = match criterion {
            PruneCriterion::Lowest => norms[a].total_cmp(&norms[b]),
            PruneCriterion::Highest => norms[b].total_cmp(&norms[a]),
        };
        by_norm.then(a.cmp(&b))
    });
    let mut removed: Vec<usize> = order.into_iter().take(count).collect();
    removed.sort_unstable();
    removed
}

/// Neurons removed from one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPrune {
    pub layer: usize,
    pub removed: Vec<usize>,
}

/// Decides which neurons go, from the model's current weights.
pub fn plan_pruning(model: &Model, spec: &PruneSpec) -> Result<Vec<LayerPrune>> {
    if !(0.0..1.0).contains(&spec.ratio) {
        return Err(Error::contract(format!("prune ratio {} outside [0, 1)", spec.ratio)));
    }
    let layers = model.layers();
    let Some(head) = layers.iter().rposition(Layer::is_parametric) else {
        return Ok(Vec::new());
    };
    let mut plan = Vec::new();
    for (i, layer) in layers.iter().enumerate().take(head) {
        let weight = match layer {
            Layer::Dense(d) => &d.weight,
            Layer::Conv2d(c) => &c.weight,
            _ => continue,
        };
        let neurons = weight.rows();
        let count = (spec.ratio * neurons as f64).floor() as usize;
        if count >= neurons {
            return Err(Error::contract(format!(
                "prune ratio {} would remove all {neurons} neurons of layer {i}",
                spec.ratio
            )));
        }
        plan.push(LayerPrune { layer: i, removed: select_pruned(&neuron_norms(weight), count, spec.criterion) });
    }
    Ok(plan)
}

/// Rebuilds the model without the planned neurons.
pub fn apply_pruning(model: &Model, plan: &[LayerPrune]) -> Result<Model> {
    // per-example input shape of every layer, before any change
    let mut shapes = Vec::with_capacity(model.layers().len());
    let mut shape = model.input_shape().to_vec();
    for layer in model.layers() {
        shapes.push(shape.clone());
        shape = layer.output_shape(&shape)?;
    }

    let mut pruned = model.clone();
    let layers = pruned.layers_mut();
    for step in plan {
        if step.removed.is_empty() {
            continue;
        }
        let neurons = match &layers[step.layer] {
            Layer::Dense(d) => d.outputs(),
            Layer::Conv2d(c) => c.filters(),
            other => return Err(Error::contract(format!("cannot prune a {} layer", other.kind()))),
        };
        let keep: Vec<usize> = (0..neurons).filter(|i| step.removed.binary_search(i).is_err()).collect();
        match &mut layers[step.layer] {
            Layer::Dense(d) => {
                d.weight = d.weight.select_rows(&keep);
                d.bias = d.bias.select_rows(&keep);
                if let Some(q) = &mut d.quant {
                    q.state.weight_scale = weight_scales(&d.weight);
                }
            }
            Layer::Conv2d(c) => {
                c.weight = c.weight.select_rows(&keep);
                c.bias = c.bias.as_ref().map(|b| b.select_rows(&keep));
                if let Some(q) = &mut c.quant {
                    q.state.weight_scale = weight_scales(&c.weight);
                }
            }
            _ => unreachable!(),
        }

        // carry the surviving channels forward to the next parametric layer
        let mut keep = keep;
        let mut j = step.layer + 1;
        loop {
            let Some(layer) = layers.get_mut(j) else {
                return Err(Error::contract(format!("pruned layer {} feeds no parametric layer", step.layer)));
            };
            match layer {
                Layer::BatchNorm(bn) => bn.select(&keep),
                Layer::Relu | Layer::Dropout(_) => {}
                Layer::Flatten => {
                    let per_channel: usize = shapes[j][1..].iter().product();
                    keep = keep.iter().flat_map(|&c| c * per_channel..(c + 1) * per_channel).collect();
                }
                Layer::Dense(d) => {
                    d.weight = d.weight.select_axis1(&keep);
                    break;
                }
                Layer::Conv2d(c) => {
                    c.weight = c.weight.select_axis1(&keep);
                    break;
                }
            }
            j += 1;
        }
    }
    pruned.validate()?;
    Ok(pruned)
}

/// Plans and applies one-shot pruning.
pub fn prune_model(model: &Model, spec: &PruneSpec) -> Result<Model> {
    let plan = plan_pruning(model, spec)?;
    apply_pruning(model, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_l1_norms() {
        let w = Tensor::from_rows(&[[1.0, -1.0], [3.0, 0.0], [0.1, 0.1]]).unwrap();
        let n = neuron_norms(&w);
        assert_eq!(&n[..2], &[2.0, 3.0]);
        assert!((n[2] - 0.2).abs() < 1e-15);

        let permuted = Tensor::from_rows(&[[-1.0, 1.0], [0.0, 3.0], [0.1, 0.1]]).unwrap();
        assert_eq!(neuron_norms(&permuted), n);
        let equal = Tensor::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert_eq!(neuron_norms(&equal), vec![3.0, 3.0]);
    }

    #[test]
    fn two_smallest_are_removed() {
        assert_eq!(select_pruned(&[0.1, 5.0, 3.0, 0.2], 2, PruneCriterion::Lowest), vec![0, 3]);
        assert_eq!(select_pruned(&[0.1, 5.0, 3.0, 0.2], 2, PruneCriterion::Highest), vec![1, 2]);
        assert_eq!(select_pruned(&[1.0, 1.0, 1.0], 2, PruneCriterion::Lowest), vec![0, 1]);
    }
}
