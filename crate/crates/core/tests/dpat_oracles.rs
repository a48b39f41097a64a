mod common;

use apseg::dpat::{self, PrototypeMatrix};
use apseg::mask::Mask;
use apseg::tensor::Tensor;

#[test]
fn ccs_matches_brute_force_on_random_instances() {
    common::ccs_agreement(500, 1).unwrap();
}

#[test]
fn ccs_ties_go_to_the_lowest_index() {
    // Two identical query columns: the forward match must pick the first.
    let fs = Tensor::<f64>::from_f64(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let fq = Tensor::<f64>::from_f64(&[2, 1, 3], &[0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    let region = Mask::from_fn(1, 2, |_, x| x == 0);
    let (m, _) = dpat::ccs(&fs, &fq, &region).unwrap();
    assert_eq!(m.forward, vec![1]);
    assert_eq!(m.reverse, vec![0]);
    assert_eq!(m.kept, vec![1]);
}

#[test]
fn anchor_residual_is_below_tolerance() {
    let worst = common::max_anchor_residual(300, 2);
    assert!(worst <= 1e-8, "{worst:e}");
}

#[test]
fn transform_sends_prototypes_to_anchors() {
    let mut r = common::rng(3);
    let p = common::normal(&mut r, &[6, 2]);
    let a = common::normal(&mut r, &[6, 2]);
    let pm = PrototypeMatrix {
        fg: (0..6).map(|i| p.data()[2 * i]).collect(),
        bg: (0..6).map(|i| p.data()[2 * i + 1]).collect(),
        fg_empty: false,
        bg_empty: false,
    };
    let w = dpat::compute_w(&pm, &a).unwrap();
    // Scaling a prototype column does not change W.
    let scaled = PrototypeMatrix { fg: pm.fg.iter().map(|v| 3.0 * v).collect(), ..pm.clone() };
    let w2 = dpat::compute_w(&scaled, &a).unwrap();
    assert!(w.max_abs_diff(&w2) < 1e-12);
}
