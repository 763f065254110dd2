mod common;

use proptest::prelude::*;

#[test]
fn every_layer_passes_at_fixed_seeds() {
    for seed in 0..3 {
        for case in common::layer_cases(seed) {
            let c = common::gradcheck(&case);
            assert!(c.passed(), "seed {seed}: {c:?}");
            assert!(c.checked > 0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_shapes_pass(seed in 3u64..10_000) {
        for case in common::layer_cases(seed) {
            let c = common::gradcheck(&case);
            prop_assert!(c.passed(), "seed {}: {:?}", seed, c);
        }
    }
}

#[test]
fn checker_rejects_a_wrong_gradient() {
    // seed 1 uses λ = 0.5, so ignoring the reversal must be caught
    let mut case = common::layer_cases(1).pop().unwrap();
    assert_eq!(case.name, "grl_composition");
    case.sign = vec![1.0; case.sign.len()];
    assert!(!common::gradcheck(&case).passed());
}
