use proptest::prelude::*;
use qreg_core::metrics::{accuracy, aggregate_runs, f1_per_task, EpochMetrics, EpochRow, RunRecord};
use qreg_core::{Rng, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};

#[test]
fn accuracy_matches_a_brute_force_recount() {
    let mut rng = Rng::seed_from_u64(1);
    for _ in 0..50 {
        // coarse values so ties actually occur
        let logits = Tensor::new(vec![100, 10], (0..1000).map(|_| rng.random_range(0..4) as f64).collect()).unwrap();
        let labels: Vec<usize> = (0..100).map(|_| rng.random_range(0..10)).collect();
        let mut hits = 0;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0;
            for c in 1..10 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            hits += usize::from(best == label);
        }
        assert_eq!(accuracy(&logits, &labels).unwrap(), hits as f64 / 100.0);
    }
}

#[test]
fn f1_matches_a_confusion_matrix_recount() {
    let mut rng = Rng::seed_from_u64(2);
    let (n, t) = (200, 12);
    for _ in 0..20 {
        let logits = Tensor::new(vec![n, t], (0..n * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<u8> = (0..n * t).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let report = f1_per_task(&logits, &labels, t).unwrap();
        for task in 0..t {
            let mut confusion = [[0usize; 2]; 2];
            for i in 0..n {
                let sigmoid = 1.0 / (1.0 + (-logits.data()[i * t + task]).exp());
                let pred = usize::from(sigmoid > 0.5);
                confusion[pred][labels[i * t + task] as usize] += 1;
            }
            let (tp, fp, fn_) = (confusion[1][1], confusion[1][0], confusion[0][1]);
            let expected = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
            assert!((report.per_task[task] - expected).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&report.per_task[task]));
        }
        let mean = report.per_task.iter().sum::<f64>() / t as f64;
        assert!((report.average - mean).abs() < 1e-12);
    }
}

fn record(seed: u64, rng: &mut Rng, epochs: usize) -> RunRecord {
    let rows = (1..=epochs)
        .map(|epoch| EpochRow {
            epoch,
            metrics: EpochMetrics {
                train_loss: rng.random(),
                val_loss: rng.random(),
                train_acc: rng.random(),
                val_acc: rng.random(),
                test_acc: rng.random(),
                f1: None,
            },
        })
        .collect();
    RunRecord { fingerprint: "abc".into(), seed, rows, final_metrics: None }
}

proptest! {
    #[test]
    fn aggregation_ignores_record_order(seed in any::<u64>(), runs in 1usize..6) {
        let mut rng = Rng::seed_from_u64(seed);
        let mut records: Vec<RunRecord> = (0..runs as u64).map(|s| record(s, &mut rng, 1 + s as usize % 3)).collect();
        let a = aggregate_runs(&records).unwrap();
        records.shuffle(&mut rng);
        let b = aggregate_runs(&records).unwrap();
        prop_assert_eq!(a, b);
    }
}
