use qreg_core::nn::{build_model, Head, Layer, Model, ModelSpec, Preset};
use qreg_core::pruning::{apply_pruning, plan_pruning, prune_model, LayerPrune, PruneSpec};
use qreg_core::{Error, Rng, Tensor};
use rand::{Rng as _, SeedableRng};

fn mnist_mlp(seed: u64) -> Model {
    let spec = ModelSpec::new(Preset::MlpSmall, vec![784], Head::Softmax { classes: 10 });
    build_model(&spec, &mut Rng::seed_from_u64(seed)).unwrap()
}

/// The original network with every removed neuron's output forced to zero.
fn zero_masked(model: &Model, plan: &[LayerPrune]) -> Model {
    let mut masked = model.clone();
    for step in plan {
        let layers = masked.layers_mut();
        for &f in &step.removed {
            match &mut layers[step.layer] {
                Layer::Dense(d) => {
                    let cols = d.weight.dim(1);
                    d.weight.data_mut()[f * cols..(f + 1) * cols].fill(0.0);
                    d.bias.data_mut()[f] = 0.0;
                }
                Layer::Conv2d(c) => {
                    let per = c.weight.numel() / c.weight.dim(0);
                    c.weight.data_mut()[f * per..(f + 1) * per].fill(0.0);
                    if let Some(b) = &mut c.bias {
                        b.data_mut()[f] = 0.0;
                    }
                }
                _ => unreachable!(),
            }
        }
        if let Some(Layer::BatchNorm(bn)) = layers.get_mut(step.layer + 1) {
            for &f in &step.removed {
                bn.gamma.data_mut()[f] = 0.0;
                bn.beta.data_mut()[f] = 0.0;
            }
        }
    }
    masked
}

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn mlp_small_at_three_quarters_matches_the_rebuilt_shape() {
    let model = mnist_mlp(1);
    let spec = PruneSpec::new(0.75);
    let plan = plan_pruning(&model, &spec).unwrap();
    assert_eq!(plan.iter().map(|p| p.removed.len()).collect::<Vec<_>>(), vec![192, 96]);
    let pruned = apply_pruning(&model, &plan).unwrap();

    let mut small = ModelSpec::new(Preset::MlpSmall, vec![784], Head::Softmax { classes: 10 });
    small.hidden = Some(vec![64, 32]);
    let reference = build_model(&small, &mut Rng::seed_from_u64(0)).unwrap();
    assert_eq!(pruned.param_count(), reference.param_count());
    assert_eq!(pruned.param_count(), 784 * 64 + 64 + 64 * 32 + 32 + 32 * 10 + 10);

    let x = random_input(&[16, 784], 2);
    assert_close(&pruned.predict(&x).unwrap(), &zero_masked(&model, &plan).predict(&x).unwrap(), 1e-9);
}

#[test]
fn removed_neurons_have_the_lowest_norms() {
    let model = mnist_mlp(3);
    let plan = plan_pruning(&model, &PruneSpec::new(0.75)).unwrap();
    for step in &plan {
        let Layer::Dense(d) = &model.layers()[step.layer] else { unreachable!() };
        let norms = qreg_core::pruning::neuron_norms(&d.weight);
        let max_removed = step.removed.iter().map(|&i| norms[i]).fold(f64::MIN, f64::max);
        for (i, &n) in norms.iter().enumerate() {
            if step.removed.binary_search(&i).is_err() {
                assert!(n >= max_removed);
            }
        }
    }
}

#[test]
fn conv_pruning_carries_batch_norm_and_flatten() {
    let spec = ModelSpec::new(Preset::CnnSmall, vec![2, 6, 6], Head::Softmax { classes: 5 });
    let mut model = build_model(&spec, &mut Rng::seed_from_u64(4)).unwrap();
    // non-trivial running statistics
    for layer in model.layers_mut() {
        if let Layer::BatchNorm(bn) = layer {
            let f = bn.features();
            bn.running_mean = (0..f).map(|i| 0.1 * i as f64).collect();
            bn.running_var = (0..f).map(|i| 1.0 + 0.05 * i as f64).collect();
            bn.beta = Tensor::new(vec![f], (0..f).map(|i| (i as f64).sin()).collect()).unwrap();
        }
    }
    let plan = plan_pruning(&model, &PruneSpec::new(0.5)).unwrap();
    assert_eq!(plan.iter().map(|p| p.removed.len()).collect::<Vec<_>>(), vec![8, 16, 32]);
    let pruned = apply_pruning(&model, &plan).unwrap();
    let x = random_input(&[3, 2, 6, 6], 5);
    let y = pruned.predict(&x).unwrap();
    assert_eq!(y.shape(), &[3, 5]);
    assert_close(&y, &zero_masked(&model, &plan).predict(&x).unwrap(), 1e-9);
}

#[test]
fn zero_ratio_is_a_no_op() {
    let model = mnist_mlp(6);
    let pruned = prune_model(&model, &PruneSpec::new(0.0)).unwrap();
    let x = random_input(&[4, 784], 7);
    assert_eq!(pruned.predict(&x).unwrap(), model.predict(&x).unwrap());
    assert_eq!(pruned, model);
}

#[test]
fn ratios_that_empty_a_layer_are_rejected() {
    let mut spec = ModelSpec::new(Preset::MlpSmall, vec![4], Head::Softmax { classes: 2 });
    spec.hidden = Some(vec![1]);
    let model = build_model(&spec, &mut Rng::seed_from_u64(0)).unwrap();
    assert!(prune_model(&model, &PruneSpec::new(0.5)).is_ok());
    let mut spec2 = spec.clone();
    spec2.hidden = Some(vec![2]);
    let model2 = build_model(&spec2, &mut Rng::seed_from_u64(0)).unwrap();
    assert!(prune_model(&model2, &PruneSpec::new(0.9)).is_ok());
    assert!(matches!(prune_model(&model2, &PruneSpec::new(1.0)), Err(Error::Contract(_))));
}
