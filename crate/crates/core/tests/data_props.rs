use prcaps_core::data::io::{load_any, save_any};
use prcaps_core::data::synthetic::{generate_graph_set, generate_synthetic, Family, SyntheticSpec};
use prcaps_core::data::GraphDataset;
use proptest::prelude::*;
use tempfile::tempdir;

fn arb_spec() -> impl Strategy<Value = SyntheticSpec> {
    (0usize..3, 2usize..5, 2usize..4, 3usize..6, any::<u64>(), 0.0f64..0.9).prop_map(|(f, depth, b, size, seed, noise)| {
        let spec = match f {
            0 => SyntheticSpec::tree(depth, b),
            1 => SyntheticSpec::cycle_clique(depth, depth, size, size),
            _ => SyntheticSpec::mixed(depth + 2, 2, size),
        };
        spec.with_seed(seed).with_noise(noise)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn node_datasets_round_trip_exactly(spec in arb_spec()) {
        let d = GraphDataset::Node(generate_synthetic(&spec).unwrap());
        let dir = tempdir().unwrap();
        save_any(&d, dir.path()).unwrap();
        prop_assert_eq!(load_any(dir.path()).unwrap(), d);
    }

    #[test]
    fn graph_datasets_round_trip_exactly(count in 2usize..10, seed in any::<u64>(), noise in 0.0f64..0.9) {
        let d = GraphDataset::Graph(generate_graph_set(count, 5, 9, noise, seed).unwrap());
        let dir = tempdir().unwrap();
        save_any(&d, dir.path()).unwrap();
        prop_assert_eq!(load_any(dir.path()).unwrap(), d);
    }

    #[test]
    fn generation_is_seed_deterministic(spec in arb_spec()) {
        prop_assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        if spec.family == Family::Tree {
            let d = generate_synthetic(&spec).unwrap();
            prop_assert_eq!(d.graph.edges.len(), d.graph.node_count - 1);
        }
    }
}
