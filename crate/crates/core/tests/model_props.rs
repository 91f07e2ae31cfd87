use prcaps_core::autodiff::Tape;
use prcaps_core::data::synthetic::{generate_graph_set, generate_synthetic, SyntheticSpec};
use prcaps_core::data::GraphDataset;
use prcaps_core::geometry::{diffeo_exp_o, on_manifold, Manifold, PseudoPoint, TangentVector};
use prcaps_core::model::{
    argmax_rows, classify_prcc, forward, predict, probabilities, ClassifierKind, ModelConfig, ModelParams, Prepared,
};
use prcaps_core::routing::{RoutingConfig, RoutingMode};
use prcaps_core::training::fit_config;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(mode: RoutingMode, classifier: ClassifierKind) -> ModelConfig {
    ModelConfig {
        encoder_dim: 8,
        capsule_layers: 2,
        space_dim: 2,
        time_dim: 2,
        primary_capsules: 3,
        hidden_capsules: 3,
        routing: RoutingConfig {
            mode,
            perspectives: 2,
            iterations: 2,
            ..RoutingConfig::default()
        },
        classifier,
        ..ModelConfig::default()
    }
}

fn arb_cell() -> impl Strategy<Value = (RoutingMode, ClassifierKind)> {
    (
        prop_oneof![
            Just(RoutingMode::Euclidean),
            Just(RoutingMode::Pcr),
            Just(RoutingMode::Acr),
            Just(RoutingMode::None)
        ],
        prop_oneof![Just(ClassifierKind::Prcc), Just(ClassifierKind::Linear)],
    )
}

fn dataset(graph_task: bool, seed: u64) -> GraphDataset {
    if graph_task {
        GraphDataset::Graph(generate_graph_set(6, 5, 8, 0.2, seed).unwrap())
    } else {
        GraphDataset::Node(generate_synthetic(&SyntheticSpec::cycle_clique(2, 2, 4, 4).with_seed(seed)).unwrap())
    }
}

fn random_point(rng: &mut ChaCha8Rng, m: &Manifold) -> PseudoPoint {
    let red: Vec<f64> = (0..m.sig.manifold_dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
    diffeo_exp_o(&TangentVector::from_reduced(&red, m.sig, m.beta).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn probabilities_form_a_simplex_and_forward_is_pure(
        (mode, cls) in arb_cell(), graph_task in any::<bool>(), seed in any::<u64>(),
    ) {
        let d = dataset(graph_task, seed);
        let cfg = fit_config(&small_config(mode, cls), &d);
        let params = ModelParams::init(&cfg, seed).unwrap();
        let data = Prepared::new(&d).unwrap();
        let all: Vec<usize> = (0..d.labels().len()).collect();
        let batch = data.batch(&all);
        let logits = predict(&params, &cfg, &batch).unwrap();
        let p = probabilities(&logits);
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        prop_assert_eq!(logits, predict(&params, &cfg, &batch).unwrap());
    }

    #[test]
    fn every_capsule_stack_is_on_the_manifold(
        mode in prop_oneof![Just(RoutingMode::Pcr), Just(RoutingMode::Acr), Just(RoutingMode::None)],
        graph_task in any::<bool>(), seed in any::<u64>(),
    ) {
        let d = dataset(graph_task, seed);
        let cfg = fit_config(&small_config(mode, ClassifierKind::Prcc), &d);
        let m = cfg.manifold().unwrap();
        let params = ModelParams::init(&cfg, seed ^ 1).unwrap();
        let data = Prepared::new(&d).unwrap();
        let all: Vec<usize> = (0..d.labels().len()).collect();
        let mut tape = Tape::new();
        let p = params.map(&mut |a| tape.constant(a.clone()));
        let out = forward(&mut tape, &p, &cfg, &data.batch(&all), None).unwrap();
        prop_assert!(!out.capsules.is_empty());
        for (stage, v) in &out.capsules {
            for row in tape.value(*v).rows() {
                let pt = PseudoPoint::from_ambient(&row.to_vec(), m.sig, m.beta).unwrap();
                prop_assert!(on_manifold(&pt, 1e-6), "{}", stage);
            }
        }
    }

    #[test]
    fn prcc_argmax_ignores_curvature_scale(
        seed in any::<u64>(), classes in 2usize..5, beta in -4.0f64..-0.05, factor in 0.01f64..100.0,
    ) {
        let m = Manifold::new(2, 3, -1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caps: Vec<PseudoPoint> = (0..classes).map(|_| random_point(&mut rng, &m)).collect();
        let protos: Vec<TangentVector> = (0..classes)
            .map(|_| {
                let red: Vec<f64> = (0..m.sig.manifold_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                TangentVector::from_reduced(&red, m.sig, m.beta).unwrap()
            })
            .collect();
        let a = classify_prcc(&caps, &protos, beta).unwrap();
        let b = classify_prcc(&caps, &protos, beta * factor).unwrap();
        let am = ndarray::Array2::from_shape_vec((1, classes), a.clone()).unwrap();
        let bm = ndarray::Array2::from_shape_vec((1, classes), b.clone()).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert_eq!(argmax_rows(&am), argmax_rows(&bm));
    }
}
