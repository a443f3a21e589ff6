mod common;

use admt_core::admt::{ccm_fuse, fuse, Ensembling};
use admt_core::metrics::{dice_jaccard, surface_distances};
use admt_core::model::ema_update;
use admt_core::{SegModel, Tensor};
use proptest::prelude::*;

fn dist(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, c).prop_map(|l| {
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    })
}

/// `pixels` distributions over 3 classes as an `N=1, C=3, H=1, W=pixels` tensor.
fn field(pixels: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(dist(3), pixels).prop_map(move |ds| {
        let mut data = vec![0.0; 3 * pixels];
        for (p, d) in ds.iter().enumerate() {
            for (c, &v) in d.iter().enumerate() {
                data[c * pixels + p] = v;
            }
        }
        Tensor::new(&[1, 3, 1, pixels], data).unwrap()
    })
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), h * w)
}

proptest! {
    #[test]
    fn ccm_is_symmetric_in_the_teachers(q1 in field(8), q2 in field(8), qs in field(8), tau in 0.05f64..0.95) {
        let a = ccm_fuse(&q1, &q2, &qs, tau).unwrap();
        let b = ccm_fuse(&q2, &q1, &qs, tau).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn raising_tau_only_removes_pixels(q1 in field(8), q2 in field(8), qs in field(8), lo in 0.05f64..0.5, gap in 0.0f64..0.45) {
        for e in [Ensembling::Drop, Ensembling::Avg, Ensembling::Entropy, Ensembling::Ccm] {
            let a = fuse(e, &q1, &q2, Some(&qs), lo).unwrap();
            let b = fuse(e, &q1, &q2, Some(&qs), lo + gap).unwrap();
            prop_assert_eq!(&a.labels, &b.labels);
            prop_assert!(a.valid.iter().zip(&b.valid).all(|(&x, &y)| x || !y));
        }
    }

    #[test]
    fn ema_contracts_towards_the_student(seed in any::<u64>(), decay in 0.0f64..=1.0) {
        let model = SegModel::new(1, 2).unwrap();
        let mut r = common::rng(seed);
        let t = model.init_params::<f64, _>(&mut r);
        let s = model.init_params::<f64, _>(&mut r);
        let next = ema_update(&t, &s, decay).unwrap();
        for ((&a, &b), &n) in t.as_slice().iter().zip(s.as_slice()).zip(next.as_slice()) {
            prop_assert!((n - b).abs() <= (a - b).abs() + 1e-15);
        }
    }

    #[test]
    fn metrics_are_symmetric(p in mask(8, 8), g in mask(8, 8)) {
        let (pl, gl): (Vec<u8>, Vec<u8>) = (p.iter().map(|&v| v as u8).collect(), g.iter().map(|&v| v as u8).collect());
        prop_assert_eq!(dice_jaccard(&pl, &gl, 1).unwrap(), dice_jaccard(&gl, &pl, 1).unwrap());
        // Same multiset of distances, summed in a different order.
        match (surface_distances(&p, &g, 8, 8).unwrap(), surface_distances(&g, &p, 8, 8).unwrap()) {
            (Some(a), Some(b)) => prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn metrics_are_translation_invariant(p in mask(6, 6), g in mask(6, 6), dy in 0usize..4, dx in 0usize..4) {
        // Embed both 6x6 masks in a 12x12 frame away from the border, then shift.
        let place = |m: &[bool], oy: usize, ox: usize| {
            let mut out = vec![false; 144];
            for y in 0..6 {
                for x in 0..6 {
                    out[(y + oy) * 12 + x + ox] = m[y * 6 + x];
                }
            }
            out
        };
        let (p0, g0) = (place(&p, 1, 1), place(&g, 1, 1));
        let (p1, g1) = (place(&p, 1 + dy, 1 + dx), place(&g, 1 + dy, 1 + dx));
        let lab = |m: &[bool]| m.iter().map(|&v| v as u8).collect::<Vec<u8>>();
        prop_assert_eq!(dice_jaccard(&lab(&p0), &lab(&g0), 1).unwrap(), dice_jaccard(&lab(&p1), &lab(&g1), 1).unwrap());
        let (a, b) = (surface_distances(&p0, &g0, 12, 12).unwrap(), surface_distances(&p1, &g1, 12, 12).unwrap());
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}
