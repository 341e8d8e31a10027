use fedquant::federation::{
    aggregate_fedavg, aggregate_inverse_msqe, weighted_average, MSQE_FLOOR,
};
use fedquant::nn::{build_model, Architecture, ModelParams};
use proptest::prelude::*;

fn contributions() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..6, 1usize..20).prop_flat_map(|(clients, len)| {
        (
            prop::collection::vec(prop::collection::vec(-100.0f64..100.0, len), clients),
            prop::collection::vec(1e-6f64..1e6, clients),
        )
    })
}

fn in_hull(out: &[f64], values: &[Vec<f64>]) -> bool {
    out.iter().enumerate().all(|(p, &x)| {
        let lo = values.iter().map(|v| v[p]).fold(f64::INFINITY, f64::min);
        let hi = values.iter().map(|v| v[p]).fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-12 * lo.abs().max(hi.abs()).max(1.0);
        x >= lo - slack && x <= hi + slack
    })
}

/// Models whose every parameter equals the client's scalar in `values`,
/// offset per layer so layers are distinguishable.
fn layered_models(values: &[f64]) -> Vec<ModelParams> {
    let base = build_model(Architecture::MnistCnn, 0);
    values
        .iter()
        .map(|&v| {
            let mut m = base.clone();
            for (i, l) in m.layers.iter_mut().enumerate() {
                for t in l.tensors_mut() {
                    t.data_mut().fill(v + i as f64);
                }
            }
            m
        })
        .collect()
}

proptest! {
    #[test]
    fn weighted_average_is_convex((values, weights) in contributions()) {
        let refs: Vec<&[f64]> = values.iter().map(Vec::as_slice).collect();
        let out = weighted_average(&refs, &weights).unwrap();
        prop_assert!(in_hull(&out, &values));
    }

    #[test]
    fn inverse_error_weights_are_scale_invariant(
        (values, errors) in contributions(),
        c in 1e-3f64..1e3,
    ) {
        let refs: Vec<&[f64]> = values.iter().map(Vec::as_slice).collect();
        let w: Vec<f64> = errors.iter().map(|e| 1.0 / e.max(MSQE_FLOOR)).collect();
        let scaled: Vec<f64> = errors.iter().map(|e| 1.0 / (c * e).max(MSQE_FLOOR)).collect();
        let a = weighted_average(&refs, &w).unwrap();
        let b = weighted_average(&refs, &scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn equal_errors_give_the_mean((values, _) in contributions(), e in 1e-9f64..10.0) {
        let refs: Vec<&[f64]> = values.iter().map(Vec::as_slice).collect();
        let out = weighted_average(&refs, &vec![1.0 / e; values.len()]).unwrap();
        let n = values.len() as f64;
        for (p, x) in out.iter().enumerate() {
            let mean = values.iter().map(|v| v[p]).sum::<f64>() / n;
            prop_assert!((x - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_aggregation_is_convex_per_layer(
        values in prop::collection::vec(-5.0f64..5.0, 1..4),
        sizes in prop::collection::vec(1u64..1000, 4),
        errors in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 4),
    ) {
        let models = layered_models(&values);
        let n = models.len();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let avg = aggregate_fedavg(&models, &sizes[..n]).unwrap();
        let inv = aggregate_inverse_msqe(&models, &errors[..n]).unwrap();
        for m in [avg, inv] {
            for (i, l) in m.layers.iter().enumerate() {
                for t in l.tensors() {
                    for &x in t.data() {
                        let x = x - i as f64;
                        prop_assert!(x >= lo - 1e-9 && x <= hi + 1e-9);
                    }
                }
            }
        }
    }
}

#[test]
fn inverse_error_hand_case() {
    let models = layered_models(&[1.0, 3.0]);
    let agg = aggregate_inverse_msqe(&models, &[vec![0.5; 4], vec![1.0; 4]]).unwrap();
    let x = agg.layers[0].weight.data()[0];
    assert!((x - 5.0 / 3.0).abs() <= 1e-12);
}

#[test]
fn fedavg_hand_case() {
    let models = layered_models(&[0.0, 4.0]);
    let agg = aggregate_fedavg(&models, &[1, 3]).unwrap();
    assert_eq!(agg.layers[0].weight.data()[0], 3.0);
}
