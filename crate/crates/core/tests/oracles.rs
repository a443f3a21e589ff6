mod common;

use admt_core::admt::{fuse, Ensembling};
use common::pixel_tensor;

#[test]
fn ccm_matches_straight_line_oracle() {
    common::ccm_oracle(5, 4000).unwrap();
}

#[test]
fn identical_teachers_reduce_to_thresholded_argmax() {
    let mut r = common::rng(6);
    for _ in 0..500 {
        let q = common::random_dist(&mut r, 4, 3.0);
        let t = pixel_tensor(&q);
        for e in [Ensembling::Avg, Ensembling::Entropy, Ensembling::Drop] {
            let got = fuse(e, &t, &t, None, 0.5).unwrap();
            let (label, valid, _, conflict) = common::ccm_pixel(&q, &q, &q, 0.5);
            assert!(!conflict);
            assert_eq!((got.labels[0], got.valid[0]), (label, valid));
        }
    }
}

#[test]
fn overlap_and_surface_metrics_match_brute_force() {
    common::metric_oracle(7, 100).unwrap();
}
