use insider_volterra::chaos::{simulate_signal, ChaosSpec};
use insider_volterra::config::ExperimentConfig;
use insider_volterra::donsker::{DonskerField, QuadratureSpec};
use insider_volterra::paths::{sample_driver, LevyModel, TimeGrid};
use insider_volterra::portfolio::interpolate_scalar;
use insider_volterra::stats::{linspace, trapezoid};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn density_integrates_to_one(beta in 0.3f64..2.0, lambda in 0.0f64..3.0, seed in 0u64..1000, k in 0usize..8) {
        let grid = TimeGrid::new(0.8, 1.0, 8).unwrap();
        let levy = if lambda > 0.05 { LevyModel::single(lambda, 0.4).unwrap() } else { LevyModel::none() };
        let spec = ChaosSpec::new(move |_| beta, |_, z| z, 1.0).unwrap();
        let paths = sample_driver(&grid, &levy, 2, seed).unwrap();
        let signal = simulate_signal(&spec, &paths, &grid).unwrap();
        let field = DonskerField::new(spec, levy, signal, grid, QuadratureSpec::default()).unwrap();
        let (vb, vn) = field.remaining_variance(k);
        let sd = (vb + vn).sqrt();
        let c = field.signal().value(1, k);
        let zs = linspace(c - 8.0 * sd, c + 8.0 * sd, 400);
        let m: Vec<f64> = zs.iter().map(|&z| field.conditional_density(k, z, 1).unwrap()).collect();
        prop_assert!(m.iter().all(|v| *v >= -1e-10));
        prop_assert!((trapezoid(&m, zs[1] - zs[0]) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn config_hash_ignores_layout(seed in 0u64..u64::MAX, n in 2usize..5000) {
        let a = format!(r#"{{"name":"p","grid":{{"T":0.5,"T0":1.0,"N":4}},"monte_carlo":{{"n_scenarios":{n},"seed":{seed}}}}}"#);
        let b = format!("{{\n  \"monte_carlo\": {{ \"seed\": {seed}, \"n_scenarios\": {n} }},\n  \"grid\": {{ \"N\": 4, \"T0\": 1.0, \"T\": 0.5 }},\n  \"name\": \"p\"\n}}");
        let ha = ExperimentConfig::from_json(&a).unwrap().hash();
        prop_assert_eq!(ha, ExperimentConfig::from_json(&b).unwrap().hash());
    }

    #[test]
    fn interpolation_stays_in_node_range(vals in prop::collection::vec(-5.0f64..5.0, 5), z in -4.0f64..4.0) {
        let nodes = linspace(-2.0, 2.0, 5);
        let v = interpolate_scalar(&nodes, &vals, z);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }
}
