//! Segmentation, keyframe resampling and track filtering against
//! brute-force oracles.

use flowplan::datagen::{
    filter_tracks, resample_keyframes, segment_atomic, AtomicSegment, FilterConfig,
};
use proptest::prelude::*;

mod common;
use common::{bits, filter_oracle, resample_oracle, segment_oracle, tracks};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn segmentation_matches_oracle(b in bits(), persistence in 1usize..5, min_len in 1usize..6) {
        let got: Vec<(usize, usize, u8)> = segment_atomic(&b, persistence, min_len).iter().map(|s| (s.start, s.end, s.gripper_state)).collect();
        prop_assert_eq!(&got, &segment_oracle(&b, persistence, min_len));
        prop_assert_eq!(got[0].0, 0);
        prop_assert_eq!(got.last().unwrap().1, b.len() - 1);
        for w in got.windows(2) {
            prop_assert_eq!(w[0].1 + 1, w[1].0);
        }
    }

    #[test]
    fn resampling_matches_exact_rational_oracle(s in 0usize..200, span in 0usize..300, off in 0usize..300, k in 2usize..12, gamma in 1u32..4) {
        let seg = AtomicSegment { start: s, end: s + span, gripper_state: 0 };
        let start = s + off.min(span);
        let got = resample_keyframes(&seg, start, k, gamma as f64).unwrap();
        prop_assert_eq!(got, resample_oracle(start, s + span, k, gamma));
    }

    #[test]
    fn resampling_is_monotone_with_fixed_ends(s in 0usize..200, span in 0usize..300, k in 2usize..12, gamma in 0.1f64..5.0) {
        let seg = AtomicSegment { start: s, end: s + span, gripper_state: 1 };
        let got = resample_keyframes(&seg, s, k, gamma).unwrap();
        prop_assert_eq!(got[0], s);
        prop_assert_eq!(got[k - 1], s + span);
        prop_assert!(got.windows(2).all(|w| w[0] <= w[1]));
        // u^g shrinks as g grows, so a larger exponent never moves a sample later
        let steeper = resample_keyframes(&seg, s, k, gamma + 1.0).unwrap();
        prop_assert!(got.iter().zip(&steeper).all(|(a, b)| b <= a));
    }

    #[test]
    fn filtering_matches_oracle(t in tracks(), st in 0.0f64..0.3, mad_k in 0.5f64..6.0, dm in 0.02f64..0.4) {
        let cfg = FilterConfig { static_threshold: st, outlier_mad_k: mad_k, delta_max: dm };
        prop_assert_eq!(filter_tracks(&t, &cfg), filter_oracle(&t, &cfg));
    }
}

#[test]
fn worked_examples() {
    let b = |v: &[u8]| v.iter().map(|&x| x == 1).collect::<Vec<_>>();
    let spans = |v: Vec<AtomicSegment>| v.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>();
    assert_eq!(
        spans(segment_atomic(&b(&[0, 0, 0, 1, 1, 1, 0, 0, 0]), 2, 2)),
        vec![(0, 2), (3, 5), (6, 8)]
    );
    assert_eq!(
        spans(segment_atomic(&b(&[0, 0, 1, 0, 0]), 2, 1)),
        vec![(0, 4)]
    );
    assert_eq!(spans(segment_atomic(&[true; 7], 3, 2)), vec![(0, 6)]);
    let seg = |s, e| AtomicSegment {
        start: s,
        end: e,
        gripper_state: 0,
    };
    assert_eq!(
        resample_keyframes(&seg(10, 50), 10, 5, 2.0).unwrap(),
        vec![10, 12, 20, 32, 50]
    );
    assert_eq!(
        resample_keyframes(&seg(0, 10), 0, 3, 1.0).unwrap(),
        vec![0, 5, 10]
    );
    assert_eq!(
        resample_keyframes(&seg(7, 7), 7, 4, 2.0).unwrap(),
        vec![7; 4]
    );
    assert_eq!(
        resample_keyframes(&seg(0, 27), 0, 4, 3.0).unwrap(),
        vec![0, 1, 8, 27]
    );
    assert!(resample_keyframes(&seg(0, 10), 11, 3, 1.0).is_err());
}
