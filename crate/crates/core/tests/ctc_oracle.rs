mod common;

use common::{ctc_fd_errors, ctc_instance};
use hmctc::ctc::{brute_force_log_likelihood, ctc_log_likelihood, greedy_decode, LabelSequence};
use hmctc::numeric::{log_softmax_rows, named_rng, Tensor};
use proptest::prelude::*;

#[test]
fn lattice_matches_enumeration_on_seeded_instances() {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut rng = named_rng(seed, "ctc.oracle");
        for _ in 0..20 {
            let (logits, z) = ctc_instance(&mut rng, 6, 4, 3);
            let lp = log_softmax_rows(&logits);
            let fast = ctc_log_likelihood(&lp, &z).unwrap();
            let slow = brute_force_log_likelihood(&lp, &z).unwrap();
            worst = worst.max((fast - slow).abs());
        }
    }
    assert!(worst <= 1e-9, "worst gap {worst}");
}

#[test]
fn two_frame_hand_case() {
    let lp = Tensor::from_rows(&[vec![0.5f64.ln(); 2], vec![0.5f64.ln(); 2]]).unwrap();
    let z = LabelSequence::new(vec![1]).unwrap();
    assert!((ctc_log_likelihood(&lp, &z).unwrap() - 0.75f64.ln()).abs() < 1e-12);
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = named_rng(0, "ctc.fd");
    for _ in 0..50 {
        let (logits, z) = ctc_instance(&mut rng, 6, 4, 3);
        let (rel, row_sum) = ctc_fd_errors(&logits, &z, 1e-5);
        assert!(rel <= 1e-5, "relative error {rel} for {z:?}");
        assert!(row_sum <= 1e-10, "row sum {row_sum}");
    }
}

#[test]
fn infeasible_target_has_zero_probability() {
    let lp = log_softmax_rows(&Tensor::zeros(&[2, 3]));
    let z = LabelSequence::new(vec![1, 1]).unwrap();
    assert_eq!(ctc_log_likelihood(&lp, &z).unwrap(), f64::NEG_INFINITY);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_over_all_targets_sum_to_one(seed in any::<u64>()) {
        // every frame path collapses to exactly one label sequence
        let mut rng = named_rng(seed, "ctc.partition");
        let frames = 3;
        let classes = 3;
        let logits = hmctc::numeric::uniform_tensor(&[frames, classes], -2.0, 2.0, &mut rng);
        let lp = log_softmax_rows(&logits);
        let mut total = 0.0;
        let mut targets = vec![vec![]];
        for len in 1..=frames {
            let mut next = Vec::new();
            for t in targets.iter().filter(|t: &&Vec<usize>| t.len() == len - 1) {
                for c in 1..classes {
                    let mut u = t.clone();
                    u.push(c);
                    next.push(u);
                }
            }
            targets.extend(next);
        }
        for t in targets {
            let z = LabelSequence::new(t).unwrap();
            total += ctc_log_likelihood(&lp, &z).unwrap().exp();
        }
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lattice_matches_enumeration(seed in any::<u64>()) {
        let mut rng = named_rng(seed, "ctc.prop");
        let (logits, z) = ctc_instance(&mut rng, 5, 4, 3);
        let lp = log_softmax_rows(&logits);
        let fast = ctc_log_likelihood(&lp, &z).unwrap();
        let slow = brute_force_log_likelihood(&lp, &z).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-9);
    }

    #[test]
    fn greedy_output_never_contains_blank_or_adjacent_repeats_of_the_path(seed in any::<u64>()) {
        let mut rng = named_rng(seed, "ctc.greedy");
        let (logits, _) = ctc_instance(&mut rng, 8, 5, 0);
        let decoded = greedy_decode(&log_softmax_rows(&logits));
        prop_assert!(decoded.ids().iter().all(|&c| c != 0));
        prop_assert!(decoded.len() <= logits.rows());
    }
}
