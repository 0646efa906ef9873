//! Central finite-difference gradient checking and a table of random
//! instances covering every differentiable graph operation.

use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// Gradient magnitudes below this are compared absolutely.
pub const ERROR_FLOOR: f64 = 1e-3;

/// One random test point. `inputs` are differentiated; `aux` tensors are
/// handed to the builder as plain data.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub aux: Vec<Tensor>,
}

type Builder = fn(&mut Graph, &[Var], &[Tensor]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub sample: fn(&mut Rng) -> Instance,
    /// Returns any-shaped output; non-scalar outputs are contracted with a
    /// fixed random probe before differentiation.
    pub build: Builder,
}

fn contract_with_probe(g: &mut Graph, out: Var, probe: &Tensor) -> Result<Var> {
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let p = g.constant(probe.clone());
    let prod = g.mul(out, p)?;
    Ok(g.sum(prod))
}

fn eval_scalar(build: Builder, inputs: &[Tensor], aux: &[Tensor], probe: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars, aux)?;
    let s = contract_with_probe(&mut g, out, probe)?;
    Ok(g.value(s).item())
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, ERROR_FLOOR)`
/// over every input entry, using central differences with step `h`.
pub fn max_relative_error(build: Builder, instance: &Instance, probe_rng: &mut Rng, h: f64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = instance.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars, &instance.aux)?;
    let probe = Tensor::new(
        g.shape(out).to_vec(),
        (0..g.value(out).numel()).map(|_| probe_rng.random_range(-1.0..1.0)).collect(),
    )?;
    let loss = contract_with_probe(&mut g, out, &probe)?;
    g.backward(loss)?;

    let mut worst = 0.0f64;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(v);
        for j in 0..instance.inputs[k].numel() {
            let mut shifted = instance.inputs.clone();
            shifted[k].data_mut()[j] += h;
            let up = eval_scalar(build, &shifted, &instance.aux, &probe)?;
            shifted[k].data_mut()[j] -= 2.0 * h;
            let down = eval_scalar(build, &shifted, &instance.aux, &probe)?;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ERROR_FLOOR);
            if !err.is_finite() {
                return Err(Error::Training(format!("non-finite gradient check on input {k}")));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("non-empty shape")
}

/// Uniform in [-1, 1], kept at least `gap` away from each of `kinks`.
fn away_from(rng: &mut Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(-1.0..1.0);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

fn inputs(inputs: Vec<Tensor>) -> Instance {
    Instance { inputs, aux: Vec::new() }
}

fn soft_targets(rng: &mut Rng, n: usize, c: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![n, c], data).expect("target shape")
}

/// Every differentiable operation with a random-instance generator.
pub fn op_suite() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            sample: |r| inputs(vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)]),
            build: |g, v, _| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "matmul_t",
            sample: |r| inputs(vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0)]),
            build: |g, v, _| g.matmul_t(v[0], v[1]),
        },
        OpCase {
            name: "add_broadcast",
            sample: |r| inputs(vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)]),
            build: |g, v, _| g.add(v[0], v[1]),
        },
        OpCase {
            name: "sub",
            sample: |r| inputs(vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)]),
            build: |g, v, _| g.sub(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            sample: |r| inputs(vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)]),
            build: |g, v, _| g.mul(v[0], v[1]),
        },
        OpCase {
            name: "mul_broadcast",
            sample: |r| inputs(vec![uniform(r, &[4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)]),
            build: |g, v, _| g.mul(v[0], v[1]),
        },
        OpCase {
            name: "relu",
            sample: |r| inputs(vec![away_from(r, &[4, 5], &[0.0], 1e-2)]),
            build: |g, v, _| g.relu(v[0]),
        },
        OpCase {
            name: "sigmoid",
            sample: |r| inputs(vec![uniform(r, &[4, 5], -4.0, 4.0)]),
            build: |g, v, _| g.sigmoid(v[0]),
        },
        OpCase { name: "exp", sample: |r| inputs(vec![uniform(r, &[4, 5], -2.0, 2.0)]), build: |g, v, _| g.exp(v[0]) },
        OpCase { name: "log", sample: |r| inputs(vec![uniform(r, &[4, 5], 0.2, 3.0)]), build: |g, v, _| g.log(v[0]) },
        OpCase {
            name: "clamp",
            sample: |r| inputs(vec![away_from(r, &[4, 5], &[-0.5, 0.5], 1e-2)]),
            build: |g, v, _| g.clamp(v[0], -0.5, 0.5),
        },
        OpCase {
            name: "scale",
            sample: |r| inputs(vec![uniform(r, &[3, 3], -1.0, 1.0)]),
            build: |g, v, _| Ok(g.scale(v[0], -2.5)),
        },
        OpCase {
            name: "sum",
            sample: |r| inputs(vec![uniform(r, &[3, 3], -1.0, 1.0)]),
            build: |g, v, _| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
        },
        OpCase {
            name: "mean",
            sample: |r| inputs(vec![uniform(r, &[3, 3], -1.0, 1.0)]),
            build: |g, v, _| {
                let e = g.exp(v[0])?;
                Ok(g.mean(e))
            },
        },
        OpCase {
            name: "reshape",
            sample: |r| inputs(vec![uniform(r, &[2, 6], -1.0, 1.0)]),
            build: |g, v, _| g.reshape(v[0], vec![3, 4]),
        },
        OpCase {
            name: "conv2d",
            sample: |r| {
                let stride = r.random_range(1..=2usize);
                let padding = r.random_range(0..=1usize);
                Instance {
                    inputs: vec![uniform(r, &[2, 2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0)],
                    aux: vec![Tensor::vector(vec![stride as f64, padding as f64])],
                }
            },
            build: |g, v, aux| {
                let geom = aux[0].data();
                g.conv2d(v[0], v[1], geom[0] as usize, geom[1] as usize)
            },
        },
        OpCase {
            name: "channel_bias",
            sample: |r| inputs(vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)]),
            build: |g, v, _| g.channel_bias(v[0], v[1]),
        },
        OpCase {
            name: "batch_norm_train",
            sample: |r| {
                inputs(vec![uniform(r, &[6, 3], -2.0, 2.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -1.0, 1.0)])
            },
            build: |g, v, _| g.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _, _)| y),
        },
        OpCase {
            name: "batch_norm_train_conv",
            sample: |r| {
                inputs(vec![
                    uniform(r, &[3, 2, 2, 2], -2.0, 2.0),
                    uniform(r, &[2], 0.5, 1.5),
                    uniform(r, &[2], -1.0, 1.0),
                ])
            },
            build: |g, v, _| g.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _, _)| y),
        },
        OpCase {
            name: "batch_norm_eval",
            sample: |r| Instance {
                inputs: vec![uniform(r, &[4, 3], -2.0, 2.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -1.0, 1.0)],
                aux: vec![uniform(r, &[3], -0.5, 0.5), uniform(r, &[3], 0.5, 2.0)],
            },
            build: |g, v, aux| g.batch_norm_eval(v[0], v[1], v[2], aux[0].data(), aux[1].data(), 1e-5),
        },
        OpCase {
            name: "softmax_cross_entropy",
            sample: |r| Instance { inputs: vec![uniform(r, &[4, 5], -3.0, 3.0)], aux: vec![soft_targets(r, 4, 5)] },
            build: |g, v, aux| g.softmax_cross_entropy(v[0], &aux[0]),
        },
        OpCase {
            name: "sigmoid_bce",
            sample: |r| Instance {
                inputs: vec![uniform(r, &[4, 3], -4.0, 4.0)],
                aux: vec![uniform(r, &[4, 3], 0.0, 1.0)],
            },
            build: |g, v, aux| g.sigmoid_bce(v[0], &aux[0]),
        },
    ]
}
