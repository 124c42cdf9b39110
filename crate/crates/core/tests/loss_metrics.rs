mod common;

use proptest::prelude::*;
use segkit::loss_metrics::{
    bce, combined_loss, combined_loss_graph, dice, iou_binary, soft_jaccard, JaccardVariant, JACCARD_EPS,
};
use segkit::mask::BinaryMask;
use segkit::tensor::{Graph, Tensor};

fn t(values: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![1, 1, 1, values.len()], values.to_vec()).unwrap()
}

#[test]
fn bce_of_half_is_ln2() {
    let v = bce(&t(&[0.5; 6]), &t(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0])).unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn soft_jaccard_hand_values() {
    let p = t(&[0.8, 0.2, 0.6, 0.0]);
    let y = t(&[1.0, 0.0, 1.0, 0.0]);
    let agg = soft_jaccard(&p, &y, JaccardVariant::Aggregate, 0.0).unwrap();
    assert!((agg - 1.4 / 2.2).abs() < 1e-12);
    // per pixel: 0.8, 0, 0.6 and 0/eps
    let pp = soft_jaccard(&p, &y, JaccardVariant::PerPixel, JACCARD_EPS).unwrap();
    assert!((pp - (0.8 / (1.0 + JACCARD_EPS) + 0.6 / (1.0 + JACCARD_EPS)) / 4.0).abs() < 1e-12);
}

#[test]
fn combined_loss_is_h_minus_log_j() {
    let p = t(&[0.9, 0.3, 0.7, 0.1]);
    let y = t(&[1.0, 0.0, 1.0, 0.0]);
    let h = -(0.9f64.ln() + 0.7f64.ln() + 0.7f64.ln() + 0.9f64.ln()) / 4.0;
    let j = (1.6 + JACCARD_EPS) / (2.0 + 2.0 - 1.6 + JACCARD_EPS);
    let l = combined_loss(&p, &y, JaccardVariant::Aggregate).unwrap();
    assert!((l - (h - j.ln())).abs() < 1e-12);
}

#[test]
fn perfect_prediction_loss() {
    let y = t(&[1.0, 0.0, 0.0, 1.0]);
    let l = combined_loss(&y, &y, JaccardVariant::Aggregate).unwrap();
    assert!((0.0..1e-5).contains(&l), "{l}");
    // background pixels add 0 to the per-pixel mean, so J is the positive fraction
    let l = combined_loss(&y, &y, JaccardVariant::PerPixel).unwrap();
    assert!((l - 2.0f64.ln()).abs() < 1e-5, "{l}");
}

#[test]
fn shape_mismatch_is_an_error() {
    assert!(bce(&t(&[0.5, 0.5]), &t(&[1.0])).is_err());
    let a = BinaryMask::empty(2, 2);
    let b = BinaryMask::empty(2, 3);
    assert!(iou_binary(&a, &b).is_err());
}

#[test]
fn iou_and_dice_hand_values() {
    let a = BinaryMask::from_fn(4, 4, |r, _| r < 2);
    let b = BinaryMask::from_fn(4, 4, |r, _| (1..3).contains(&r));
    assert!((iou_binary(&a, &b).unwrap() - 4.0 / 12.0).abs() < 1e-12);
    assert!((dice(&a, &b).unwrap() - 8.0 / 16.0).abs() < 1e-12);
    let e = BinaryMask::empty(4, 4);
    assert_eq!(iou_binary(&e, &e).unwrap(), 1.0);
    assert_eq!(dice(&e, &e).unwrap(), 1.0);
    assert_eq!(iou_binary(&a, &e).unwrap(), 0.0);
}

#[test]
fn graph_gradient_matches_finite_differences() {
    let mut rng = common::rng(5);
    let raw = common::normal_tensor(vec![2, 1, 3, 3], &mut rng);
    let probs = Tensor::from_fn(vec![2, 1, 3, 3], |i| 1.0 / (1.0 + (-raw.data()[i]).exp())).unwrap();
    let labels = Tensor::from_fn(vec![2, 1, 3, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 }).unwrap();
    for variant in [JaccardVariant::Aggregate, JaccardVariant::PerPixel] {
        let mut g = Graph::<f64>::new();
        let p = g.param(0, probs.clone());
        let terms = combined_loss_graph(&mut g, p, &labels, variant).unwrap();
        let grads = g.backward(terms.loss).unwrap();
        let analytic = grads.param(0).unwrap();
        let h = 1e-6;
        for i in 0..probs.len() {
            let mut plus = probs.clone();
            plus.data_mut()[i] += h;
            let mut minus = probs.clone();
            minus.data_mut()[i] -= h;
            let numeric = (combined_loss(&plus, &labels, variant).unwrap()
                - combined_loss(&minus, &labels, variant).unwrap())
                / (2.0 * h);
            let err = common::relative_error(analytic.data()[i], numeric, 1e-6);
            assert!(err < 1e-5, "{variant:?} entry {i}: {} vs {numeric}", analytic.data()[i]);
        }
    }
}

proptest! {
    #[test]
    fn combined_loss_is_nonnegative(
        cells in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..64),
        per_pixel in any::<bool>(),
    ) {
        let p: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let y: Vec<f64> = cells.iter().map(|c| f64::from(u8::from(c.1))).collect();
        let variant = if per_pixel { JaccardVariant::PerPixel } else { JaccardVariant::Aggregate };
        let l = combined_loss(&t(&p), &t(&y), variant).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
        let j = soft_jaccard(&t(&p), &t(&y), variant, JACCARD_EPS).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&j));
    }

    #[test]
    fn dice_is_monotone_in_iou(bits in prop::collection::vec(any::<(bool, bool)>(), 1..100)) {
        let n = bits.len();
        let a = BinaryMask::from_fn(1, n, |_, c| bits[c].0);
        let b = BinaryMask::from_fn(1, n, |_, c| bits[c].1);
        let j = iou_binary(&a, &b).unwrap();
        let d = dice(&a, &b).unwrap();
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
    }
}
