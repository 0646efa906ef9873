use qreg_core::gradcheck::{max_relative_error, op_suite};
use qreg_core::Rng;
use rand::SeedableRng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

#[test]
fn every_op_matches_central_differences() {
    for case in op_suite() {
        let mut rng = Rng::seed_from_u64(0xd1ff);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let inst = (case.sample)(&mut rng);
            worst = worst.max(max_relative_error(case.build, &inst, &mut rng, STEP).unwrap());
        }
        assert!(worst < TOLERANCE, "{}: relative error {worst:e}", case.name);
    }
}

#[test]
fn weight_decay_gradient_matches_differences() {
    use qreg_core::regularization::weight_decay_loss;
    use qreg_core::{Graph, Tensor};
    let w = Tensor::from_rows(&[[0.3, -1.2, 2.0], [0.5, 0.0, -0.7]]).unwrap();
    let f = |w: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(w.clone());
        let l = weight_decay_loss(&mut g, &[v], 0.05).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let v = g.param(w.clone());
    let l = weight_decay_loss(&mut g, &[v], 0.05).unwrap();
    g.backward(l).unwrap();
    let analytic = g.grad(v).unwrap().clone();
    for j in 0..w.numel() {
        let (mut up, mut down) = (w.clone(), w.clone());
        up.data_mut()[j] += STEP;
        down.data_mut()[j] -= STEP;
        let numeric = (f(&up) - f(&down)) / (2.0 * STEP);
        assert!((numeric - analytic.data()[j]).abs() < 1e-8);
        assert!((analytic.data()[j] - 2.0 * 0.05 * w.data()[j]).abs() < 1e-15);
    }
}
