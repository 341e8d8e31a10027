use fedquant::quant::{
    dequantize, fake_quantize_at, octav_threshold, octav_update, quantize, LevelGrid, QuantMode,
    QuantSpec, ThresholdMode,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn spec(bits: u8, mode: QuantMode) -> QuantSpec {
    QuantSpec::new(bits, mode, ThresholdMode::Octav).unwrap()
}

proptest! {
    #[test]
    fn deterministic_error_within_half_step(
        bits in 1u8..=16,
        s in 1e-3f64..1e3,
        t in -1.0f64..=1.0,
    ) {
        let x = t * s;
        let grid = LevelGrid::new(bits, s).unwrap();
        let q = grid.level(grid.nearest_index(x));
        prop_assert!((x - q).abs() <= grid.step() / 2.0 * (1.0 + 1e-9));
    }

    #[test]
    fn grid_is_symmetric(bits in 1u8..=32, s in 1e-6f64..1e6) {
        let grid = LevelGrid::new(bits, s).unwrap();
        let top = grid.max_index();
        prop_assert_eq!(grid.level(0), -s);
        prop_assert_eq!(grid.level(top), s);
        for k in [0, 1, top / 3, top / 2, top - 1] {
            prop_assert_eq!(grid.level(k), -grid.level(top - k));
        }
    }

    #[test]
    fn zero_dither_matches_deterministic(bits in 1u8..=32, s in 1e-3f64..1e3, t in -1.5f64..1.5) {
        let grid = LevelGrid::new(bits, s).unwrap();
        let x = t * s;
        prop_assert_eq!(grid.dithered_index(x, 0.0), grid.nearest_index(x));
    }

    #[test]
    fn indices_in_range_and_reconstruction_bounded(
        bits in 1u8..=32,
        values in prop::collection::vec(-10.0f64..10.0, 1..200),
        s in 0.01f64..5.0,
        seed in any::<u64>(),
        stochastic in any::<bool>(),
    ) {
        let mode = if stochastic { QuantMode::Stochastic } else { QuantMode::Deterministic };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = quantize(&values, &spec(bits, mode), s, Some(&mut rng)).unwrap();
        let top = LevelGrid::new(bits, s).unwrap().max_index();
        prop_assert!(q.levels.iter().all(|&k| u64::from(k) <= top));
        let back = dequantize(&q).unwrap();
        prop_assert!(back.iter().all(|v| v.abs() <= s));
    }

    #[test]
    fn msqe_matches_direct_computation(
        bits in 1u8..=8,
        values in prop::collection::vec(-3.0f64..3.0, 1..100),
        s in 0.1f64..3.0,
    ) {
        let fq = fake_quantize_at(&values, &spec(bits, QuantMode::Deterministic), s, None).unwrap();
        let direct: f64 = values.iter().zip(&fq.values).map(|(x, q)| (x - q).powi(2)).sum::<f64>()
            / values.len() as f64;
        prop_assert!((fq.stats.msqe - direct).abs() <= 1e-15 * direct.max(1.0));
    }

    #[test]
    fn octav_fixed_point(seed in any::<u64>(), bits in prop::sample::select(vec![2u8, 4, 8])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let values: Vec<f64> = (0..2000).map(|_| normal.sample(&mut rng)).collect();
        let tol = 1e-6;
        let out = octav_threshold(&values, bits, 200, tol).unwrap();
        prop_assume!(out.converged());
        let again = octav_update(&values, bits, out.threshold).unwrap();
        prop_assert!((again - out.threshold).abs() / out.threshold < tol);
    }

    #[test]
    fn octav_stays_within_tensor_range(
        values in prop::collection::vec(-5.0f64..5.0, 1..300),
        bits in 1u8..=12,
    ) {
        prop_assume!(values.iter().any(|&x| x != 0.0));
        let max = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let out = octav_threshold(&values, bits, 10, 1e-6).unwrap();
        prop_assert!(out.threshold > 0.0 && out.threshold <= max * (1.0 + 1e-12));
    }
}

#[test]
fn stochastic_rounding_is_unbiased_in_the_interior() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let sp = spec(2, QuantMode::Stochastic);
    let x = vec![0.55; 200_000];
    let q = quantize(&x, &sp, 1.0, Some(&mut rng)).unwrap();
    let mean = dequantize(&q).unwrap().iter().sum::<f64>() / x.len() as f64;
    let step = 2.0 / 3.0;
    assert!((mean - 0.55).abs() < 4.0 * step / (12.0 * x.len() as f64).sqrt());
}
