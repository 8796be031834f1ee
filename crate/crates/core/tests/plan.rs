mod common;

use common::{check_subdivision, reference_order};
use proptest::prelude::*;
use sfvd_core::sampler::{chronological_order, plan, subdivision_order, Conditioning, SamplingMode, Stage};

#[test]
fn subdivision_invariants_exhaustive() {
    for n in 1..=64 {
        let p = subdivision_order(n).unwrap();
        check_subdivision(&p, n).unwrap_or_else(|e| panic!("N = {n}: {e}"));
        p.validate().unwrap();
        assert_eq!(p.targets(), reference_order(n), "N = {n}");
    }
}

#[test]
fn sixteen_frame_order() {
    assert_eq!(
        subdivision_order(16).unwrap().targets(),
        vec![0, 15, 7, 3, 11, 1, 5, 9, 13, 2, 4, 6, 8, 10, 12, 14]
    );
}

#[test]
fn small_cases() {
    let p = subdivision_order(2).unwrap();
    assert_eq!(p.targets(), vec![0, 1]);
    assert_eq!(p.steps[1].stage, Stage::Concluding);
    let p = subdivision_order(3).unwrap();
    assert_eq!(p.targets(), vec![0, 2, 1]);
    assert_eq!(
        p.steps[2].conditioning,
        Conditioning::Pair {
            first: 0,
            first_distance: 1,
            second: 2,
            second_distance: -1
        }
    );
    assert_eq!(chronological_order(1).unwrap().targets(), vec![0]);
    assert!(subdivision_order(0).is_err());
    assert!(chronological_order(0).is_err());
}

proptest! {
    #[test]
    fn chronological_structure(n in 1usize..80) {
        let p = plan(SamplingMode::Chronological, n).unwrap();
        p.validate().unwrap();
        prop_assert_eq!(p.targets(), (0..n).collect::<Vec<_>>());
        prop_assert_eq!(p.steps[0].conditioning, Conditioning::None);
        for (i, s) in p.steps.iter().enumerate().skip(1) {
            prop_assert_eq!(s.conditioning, Conditioning::Single { reference: i - 1, distance: 1 });
        }
        if n > 1 {
            prop_assert_eq!(p.steps[n - 1].stage, Stage::Concluding);
        }
    }
}
