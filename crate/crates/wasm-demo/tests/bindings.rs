use dualdist_demo::{agreement_impl, mask_slice_impl, roundtrip_impl, signed_slice_impl};

#[test]
fn slices_have_one_value_per_pixel() {
    assert_eq!(mask_slice_impl(1, "ball", 24).unwrap().len(), 24 * 24);
    assert_eq!(signed_slice_impl(1, "ellipsoid", 24, false, 0.35).unwrap().len(), 24 * 24);
}

#[test]
fn exact_signed_slice_is_negative_inside() {
    let mask = mask_slice_impl(2, "ball", 24).unwrap();
    let r = signed_slice_impl(2, "ball", 24, false, 0.35).unwrap();
    assert!(mask.iter().any(|&m| m > 0.5));
    for (m, v) in mask.iter().zip(&r) {
        if *m > 0.5 {
            assert!(*v <= 0.0);
        } else {
            assert!(*v >= 0.0);
        }
    }
}

#[test]
fn offline_original_roundtrip_is_lossless() {
    let r = roundtrip_impl(4, "two_lobe", 24, "offline-original", 0.35).unwrap();
    assert_eq!(r.dice, 1.0);
    assert_eq!(r.slice, mask_slice_impl(4, "two_lobe", 24).unwrap());
}

#[test]
fn agreement_is_rank_consistent() {
    let a = agreement_impl(5, "ball", 24, 0.35).unwrap();
    assert!(a.spearman > 0.9, "{}", a.spearman);
    assert!(a.mean_abs_error.is_finite());
}

#[test]
fn bad_inputs_are_errors() {
    assert!(mask_slice_impl(0, "cube", 24).is_err());
    assert!(mask_slice_impl(0, "ball", 64).is_err());
    assert!(mask_slice_impl(0, "ball", 8).is_err());
    assert!(roundtrip_impl(0, "ball", 24, "online", 0.35).is_err());
    assert!(signed_slice_impl(0, "ball", 24, true, -1.0).is_err());
}
