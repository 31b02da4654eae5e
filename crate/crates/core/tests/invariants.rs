mod common;

use proptest::prelude::*;

use tan_gcd::assignment;
use tan_gcd::evaluation::hungarian_accuracy;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kmeans_is_translation_equivariant(seed in any::<u64>()) {
        common::check_kmeans_translation(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn prototypes_are_translation_equivariant(seed in any::<u64>()) {
        common::check_prototype_translation(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn calibration_is_translation_equivariant(seed in any::<u64>()) {
        common::check_calibration_translation(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn alpha_one_leaves_prototypes_unchanged(seed in any::<u64>()) {
        common::check_alpha_one_identity(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn transfer_weights_lie_on_the_simplex(seed in any::<u64>()) {
        common::check_softmax_simplex(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn h_score_stays_within_bounds(seed in any::<u64>()) {
        common::check_h_score_bounds(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn accuracy_ignores_label_names(seed in any::<u64>()) {
        common::check_metric_permutation(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn hungarian_matches_exhaustive_search(
        rows in 1usize..5,
        cols in 1usize..6,
        vals in prop::collection::vec(-10.0f64..10.0, 30),
    ) {
        let cost: Vec<Vec<f64>> = (0..rows).map(|i| vals[i * cols..(i + 1) * cols].to_vec()).collect();
        let a = assignment::solve(&cost).unwrap();
        let expect = common::brute_force_assignment(&cost);
        prop_assert!((a.total_cost - expect).abs() < 1e-9, "{} vs {}", a.total_cost, expect);
        let assigned = a.row_to_col.iter().flatten().count();
        prop_assert_eq!(assigned, rows.min(cols));
        let mut used: Vec<usize> = a.row_to_col.iter().flatten().copied().collect();
        used.sort_unstable();
        used.dedup();
        prop_assert_eq!(used.len(), assigned);
    }

    #[test]
    fn accuracy_matches_exhaustive_search(
        pairs in prop::collection::vec((0usize..4, 0u32..4), 1..25),
    ) {
        let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<u32> = pairs.iter().map(|p| p.1).collect();
        let (acc, mapping) = hungarian_accuracy(&pred, &gt).unwrap();
        prop_assert!((acc - common::brute_force_accuracy(&pred, &gt)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&acc));
        let mut cats: Vec<u32> = mapping.values().copied().collect();
        cats.sort_unstable();
        cats.dedup();
        prop_assert_eq!(cats.len(), mapping.len());
    }
}
