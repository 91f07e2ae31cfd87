use ndarray::Array2;
use prcaps_core::geometry::{diffeo_exp_o, diffeo_log_o, on_manifold, Manifold, PseudoPoint, TangentVector};
use prcaps_core::routing::plain::{prr_routing, update_logits_pcr};
use prcaps_core::routing::{LayerShape, PerspectiveParams, RoutingConfig, RoutingMode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_point(rng: &mut ChaCha8Rng, m: &Manifold, scale: f64) -> PseudoPoint {
    let red: Vec<f64> = (0..m.sig.manifold_dim()).map(|_| rng.random_range(-scale..scale)).collect();
    diffeo_exp_o(&TangentVector::from_reduced(&red, m.sig, m.beta).unwrap())
}

struct Case {
    children: Vec<PseudoPoint>,
    shape: LayerShape,
    cfg: RoutingConfig,
    params: PerspectiveParams<Array2<f64>>,
}

fn case(s: usize, t: usize, nc: usize, np: usize, k: usize, mode: RoutingMode, seed: u64, scale: f64) -> Case {
    let m = Manifold::new(s, t, -1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = LayerShape {
        children: nc,
        parents: np,
        input: m,
        output: m,
    };
    let cfg = RoutingConfig {
        mode,
        perspectives: k,
        ..RoutingConfig::default()
    };
    let params = PerspectiveParams::init(&shape, &cfg, &mut rng);
    let children = (0..nc).map(|_| random_point(&mut rng, &m, scale)).collect();
    Case {
        children,
        shape,
        cfg,
        params,
    }
}

fn arb_mode() -> impl Strategy<Value = RoutingMode> {
    prop_oneof![Just(RoutingMode::Pcr), Just(RoutingMode::Acr)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn couplings_gates_and_states_stay_valid(
        s in 1usize..4, t in 1usize..4, nc in 1usize..5, np in 1usize..4, k in 1usize..4,
        mode in arb_mode(), seed in any::<u64>(), scale in 0.1f64..1.5,
    ) {
        let c = case(s, t, nc, np, k, mode, seed, scale);
        let tr = prr_routing(&c.children, &c.params, &c.shape, &c.cfg).unwrap();
        for row in &tr.iterations[0].c {
            for &cij in row {
                prop_assert!((cij - 1.0 / np as f64).abs() < 1e-15);
            }
        }
        for st in &tr.iterations {
            for row in &st.c {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
            if mode == RoutingMode::Acr {
                for g in st.gamma.iter().flatten().flatten() {
                    prop_assert!(*g > 0.0 && *g < 1.0);
                }
            }
            for p in st.parents.iter().chain(&st.aggregated).chain(&st.prev_parents) {
                prop_assert!(on_manifold(p, 1e-6));
            }
        }
        for p in tr.predictions.iter().flatten().flatten() {
            prop_assert!(on_manifold(p, 1e-6));
        }
        prop_assert_eq!(&tr, &prr_routing(&c.children, &c.params, &c.shape, &c.cfg).unwrap());
    }

    #[test]
    fn parents_ignore_child_order(
        nc in 2usize..6, np in 1usize..4, k in 1usize..4, mode in arb_mode(),
        seed in any::<u64>(), rot in 1usize..5,
    ) {
        let c = case(2, 2, nc, np, k, mode, seed, 1.0);
        let mut shuffled = c.children.clone();
        shuffled.rotate_left(rot % nc);
        shuffled.swap(0, nc - 1);
        let a = prr_routing(&c.children, &c.params, &c.shape, &c.cfg).unwrap();
        let b = prr_routing(&shuffled, &c.params, &c.shape, &c.cfg).unwrap();
        for (pa, pb) in a.parents().iter().zip(b.parents()) {
            for (x, y) in pa.ambient().iter().zip(pb.ambient()) {
                prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0), "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn single_ungated_perspective_reduces_to_pcr(
        s in 1usize..4, t in 1usize..4, nc in 1usize..5, np in 1usize..4, seed in any::<u64>(),
    ) {
        let c = case(s, t, nc, np, 1, RoutingMode::Acr, seed, 1.0);
        let acr = RoutingConfig { unit_gates: true, ..c.cfg.clone() };
        let pcr = RoutingConfig { mode: RoutingMode::Pcr, ..c.cfg.clone() };
        let a = prr_routing(&c.children, &c.params, &c.shape, &acr).unwrap();
        let p = prr_routing(&c.children, &c.params, &c.shape, &pcr).unwrap();
        for (pa, pp) in a.parents().iter().zip(p.parents()) {
            for (x, y) in pa.ambient().iter().zip(pp.ambient()) {
                prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn agreeing_predictions_never_lower_logits(
        nc in 1usize..5, np in 1usize..4, seed in any::<u64>(), b0 in -2.0f64..2.0,
    ) {
        let m = Manifold::new(2, 3, -1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parents: Vec<PseudoPoint> = (0..np).map(|_| random_point(&mut rng, &m, 1.0)).collect();
        let preds: Vec<Vec<PseudoPoint>> = vec![parents.clone(); nc];
        let mut b = vec![vec![b0; np]; nc];
        let before = b.clone();
        update_logits_pcr(&mut b, &parents, &preds).unwrap();
        for (row, old) in b.iter().zip(&before) {
            for (j, (new, old)) in row.iter().zip(old).enumerate() {
                let norm2: f64 = diffeo_log_o(&parents[j]).unwrap().reduced().iter().map(|x| x * x).sum();
                prop_assert!(new - old >= 0.0);
                prop_assert!((new - old - norm2).abs() <= 1e-9 * norm2.max(1.0));
            }
        }
    }
}
