use proptest::prelude::*;
use qreg_core::nn::{build_model, Dense, Head, Layer, Model, ModelSpec, Phase, Preset};
use qreg_core::quant::{
    act_scale_update, fake_quantize, grid_max, quantize_layer_forward, weight_scales, wrap_model, LayerQuant,
    QuantConfig, QuantState, Scale,
};
use qreg_core::{Graph, Rng, Tensor};
use rand::{Rng as _, SeedableRng};

fn fq1(x: f64, bits: u32, scale: f64) -> f64 {
    fake_quantize(&Tensor::vector(vec![x]), bits, Scale::PerTensor(scale)).unwrap().item()
}

fn bits() -> impl Strategy<Value = u32> {
    prop_oneof![Just(2u32), Just(4), Just(8), 2u32..=16]
}

proptest! {
    #[test]
    fn round_trip_error_is_half_a_step(scale in 1e-3f64..1e3, t in -1.0f64..=1.0, b in bits()) {
        let x = t * scale;
        let err = (fq1(x, b, scale) - x).abs();
        prop_assert!(err <= scale / (2.0 * grid_max(b)) * (1.0 + 1e-12));
    }

    #[test]
    fn monotone(scale in 1e-3f64..1e3, a in -2.0f64..2.0, d in 0.0f64..1.0, b in bits()) {
        let (x1, x2) = (a * scale, (a + d) * scale);
        prop_assert!(fq1(x1, b, scale) <= fq1(x2, b, scale));
    }

    #[test]
    fn odd_symmetric(scale in 1e-3f64..1e3, t in -2.0f64..2.0, b in bits()) {
        let x = t * scale;
        prop_assert_eq!(fq1(-x, b, scale).to_bits(), (-fq1(x, b, scale)).to_bits());
    }

    #[test]
    fn grid_has_at_most_2q_plus_1_values(
        xs in prop::collection::vec(-3.0f64..3.0, 1..300),
        b in prop_oneof![Just(2u32), Just(3), Just(4)],
    ) {
        let out = fake_quantize(&Tensor::vector(xs), b, Scale::PerTensor(1.0)).unwrap();
        let mut v = out.into_data();
        v.sort_by(f64::total_cmp);
        // -0.0 and 0.0 are the same grid point
        v.dedup_by(|a, b| a == b);
        prop_assert!(v.len() as f64 <= 2.0 * grid_max(b) + 1.0);
    }

    #[test]
    fn per_channel_weight_scales_never_clamp(
        rows in 1usize..5, cols in 1usize..6, seed in any::<u64>(), b in bits(),
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let w = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let scales = weight_scales(&w);
        let q = grid_max(b);
        for (r, &scale) in scales.iter().enumerate() {
            for &v in w.row(r) {
                prop_assert!((v * q / scale).abs() <= q * (1.0 + 1e-12));
            }
        }
        let wq = fake_quantize(&w, b, Scale::PerChannel(&scales)).unwrap();
        for r in 0..rows {
            let max = w.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let qmax = wq.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!((max - qmax).abs() <= 1e-12 * max.max(1.0));
        }
    }

    #[test]
    fn ema_converges_to_a_constant_batch_max(c in 1e-3f64..100.0, start in 1e-3f64..100.0) {
        let mut state = QuantState { weight_scale: vec![], act_scale: start, calibrated: true };
        let batch = Tensor::vector(vec![c, -c / 2.0]);
        for _ in 0..3000 {
            state = act_scale_update(&state, &batch, 0.99);
        }
        prop_assert!((state.act_scale - c).abs() <= 1e-9 * c.max(start));
    }
}

#[test]
fn all_zero_channel_gets_the_floor_scale() {
    let w = Tensor::from_rows(&[[1.0, -3.0], [0.0, 0.0]]).unwrap();
    assert_eq!(weight_scales(&w), vec![3.0, 1e-8]);
}

fn layer_quant(wb: u32, ab: u32, enabled: bool) -> LayerQuant {
    LayerQuant { weight_bits: wb, act_bits: ab, ema_momentum: 0.99, enabled, state: QuantState::default() }
}

fn fq(x: &Tensor, b: u32, scale: Scale<'_>) -> Tensor {
    fake_quantize(x, b, scale).unwrap()
}

#[test]
fn two_by_two_dense_matches_a_manual_straight_through_oracle() {
    let w = Tensor::from_rows(&[[0.8, -0.3], [0.27, 0.55]]).unwrap();
    let b = Tensor::vector(vec![0.1, -0.2]);
    let x = Tensor::from_rows(&[[0.9, -0.4], [0.35, 0.61]]).unwrap();
    let upstream = Tensor::from_rows(&[[1.0, -2.0], [0.5, 0.25]]).unwrap();

    let mut dense = Dense::from_parts(w.clone(), b.clone()).unwrap();
    dense.quant = Some(layer_quant(4, 4, true));
    let mut layer = Layer::Dense(dense);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = quantize_layer_forward(&mut g, &mut layer, xv, true).unwrap();
    let r = g.constant(upstream.clone());
    let prod = g.mul(y, r).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    // y = add(matmul_t(xq, wq), b)
    let product = g.parents(y)[0];
    let w_quantized = g.parents(product)[1];
    assert_eq!(g.op_name(w_quantized), "straight_through");
    let w_leaf = g.parents(w_quantized)[0];

    // oracle: y = xq·Wqᵀ + b, so dW = Rᵀ·xq and dx = R·Wq under the identity rule
    let xq = fq(&x, 4, Scale::PerTensor(x.max_abs()));
    let wq = fq(&w, 4, Scale::PerChannel(&weight_scales(&w)));
    let expected_y = xq.matmul(&wq.transpose2d().unwrap()).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let want = expected_y.data()[i * 2 + j] + b.data()[j];
            assert!((g.value(y).data()[i * 2 + j] - want).abs() < 1e-15);
        }
    }
    let dw = upstream.transpose2d().unwrap().matmul(&xq).unwrap();
    let dx = upstream.matmul(&wq).unwrap();
    for (a, e) in g.grad(w_leaf).unwrap().data().iter().zip(dw.data()) {
        assert!((a - e).abs() < 1e-15, "{a} vs {e}");
    }
    for (a, e) in g.grad(xv).unwrap().data().iter().zip(dx.data()) {
        assert!((a - e).abs() < 1e-15, "{a} vs {e}");
    }
    let Layer::Dense(d) = &layer else { unreachable!() };
    assert_eq!(d.quant.as_ref().unwrap().state.act_scale, 0.9);
}

fn dense_forward(layer: &mut Layer, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = if layer.quant().is_some_and(|q| q.enabled) {
        quantize_layer_forward(&mut g, layer, xv, true).unwrap()
    } else {
        let mut params = Vec::new();
        layer.forward_parametric(&mut g, xv, true, "l", &mut params).unwrap().0
    };
    g.value(y).clone()
}

#[test]
fn disabled_quantizer_is_a_pass_through() {
    let w = Tensor::from_rows(&[[0.123, -0.456], [0.789, 0.1011]]).unwrap();
    let x = Tensor::from_rows(&[[0.3, -0.77]]).unwrap();
    let plain = dense_forward(&mut Layer::Dense(Dense::from_parts(w.clone(), Tensor::zeros(vec![2])).unwrap()), &x);
    let mut d = Dense::from_parts(w, Tensor::zeros(vec![2])).unwrap();
    d.quant = Some(layer_quant(4, 4, false));
    assert_eq!(dense_forward(&mut Layer::Dense(d), &x), plain);
}

#[test]
fn grid_aligned_operands_pass_sixteen_bits_unchanged() {
    let q = grid_max(16);
    let w = Tensor::from_rows(&[[q / q, -1234.0 / q], [-7.0 / q, 1.0]]).unwrap();
    let x = Tensor::from_rows(&[[1.0, 5000.0 / q], [-321.0 / q, -1.0]]).unwrap();
    let plain = dense_forward(&mut Layer::Dense(Dense::from_parts(w.clone(), Tensor::zeros(vec![2])).unwrap()), &x);
    let mut d = Dense::from_parts(w, Tensor::zeros(vec![2])).unwrap();
    d.quant = Some(layer_quant(16, 16, true));
    let quantized = dense_forward(&mut Layer::Dense(d), &x);
    for (a, b) in quantized.data().iter().zip(plain.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

fn mlp(hidden: Vec<usize>, seed: u64) -> Model {
    let mut spec = ModelSpec::new(Preset::MlpSmall, vec![8], Head::Softmax { classes: 3 });
    spec.hidden = Some(hidden);
    build_model(&spec, &mut Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn boundary_layers_get_eight_bits() {
    let wrapped = wrap_model(mlp(vec![6, 5], 1), &QuantConfig::new(4, 4)).unwrap();
    assert_eq!(wrapped.quant_labels(), vec!["W8/A8", "W4/A4", "W8/A8"]);

    let single = wrap_model(mlp(vec![], 1), &QuantConfig::new(4, 4)).unwrap();
    assert_eq!(single.quant_labels(), vec!["W8/A8"]);
}

#[test]
fn wrap_then_disable_restores_predictions() {
    let model = mlp(vec![6, 5], 2);
    let x = Tensor::new(vec![4, 8], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let mut wrapped = wrap_model(model.clone(), &QuantConfig::new(4, 4)).unwrap();
    // calibrate so the enabled path really differs
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    wrapped.forward(&mut g, xv, Phase::Train(&mut Rng::seed_from_u64(0))).unwrap();
    assert_ne!(wrapped.predict(&x).unwrap(), model.predict(&x).unwrap());
    wrapped.set_quant_enabled(false);
    assert_eq!(wrapped.predict(&x).unwrap(), model.predict(&x).unwrap());
}

#[test]
fn quantized_eval_is_deterministic() {
    let mut model = wrap_model(mlp(vec![6, 5], 3), &QuantConfig::new(4, 4)).unwrap();
    let x = Tensor::new(vec![4, 8], (0..32).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    model.forward(&mut g, xv, Phase::Train(&mut Rng::seed_from_u64(0))).unwrap();
    let a = model.predict(&x).unwrap();
    let b = model.predict(&x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn straight_through_nodes_pass_gradients_bitwise() {
    let mut model = wrap_model(mlp(vec![7, 5], 4), &QuantConfig::new(4, 4)).unwrap();
    let mut rng = Rng::seed_from_u64(9);
    let x = Tensor::new(vec![6, 8], (0..48).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let mut g = Graph::new();
    let xv = g.param(x);
    let out = model.forward(&mut g, xv, Phase::Train(&mut rng)).unwrap();
    let upstream = Tensor::new(vec![6, 3], (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let r = g.constant(upstream);
    let prod = g.mul(out.logits, r).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();

    let mut checked = 0;
    for v in g.vars() {
        if g.op_name(v) != "straight_through" {
            continue;
        }
        let below = g.parents(v)[0];
        assert_eq!(g.consumers(below), vec![v]);
        let above: Vec<u64> = g.grad(v).unwrap().data().iter().map(|x| x.to_bits()).collect();
        let under: Vec<u64> = g.grad(below).unwrap().data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(above, under);
        checked += 1;
    }
    // weight and input of each of the three layers
    assert_eq!(checked, 6);
}
