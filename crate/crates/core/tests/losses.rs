mod common;

use common::all_parts;
use dualdist::dtrans::{exact_signed, Converter, TransformConfig};
use dualdist::losses::checks::{gradient_suites, packed_input, unpack_heads};
use dualdist::losses::{
    bce, confidence_mask, con_intra, prob_vote, pse_loss, pseudo_label, reg_vote, seg_loss, soft_dice_loss, total_loss,
    Heads, LossWeights,
};
use dualdist::net::DualOutput;
use dualdist::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn heads_from(t: &mut Tape<f64>, yp: Vec<f64>, ys: Vec<f64>, rp: Vec<f64>, rs: Vec<f64>) -> DualOutput {
    let n = yp.len();
    let shape = [1, 1, 1, 1, n];
    let mut c = |v: Vec<f64>| t.constant(Tensor::new(&shape, v).unwrap());
    DualOutput {
        y_phi: c(yp),
        y_psi: c(ys),
        r_phi: c(rp),
        r_psi: c(rs),
    }
}

/// Oracle: the four votes must be equal.
fn scalar_mask(yp: &[f64], ys: &[f64], rp: &[f64], rs: &[f64]) -> Vec<bool> {
    (0..yp.len())
        .map(|i| {
            let votes = [yp[i] >= 0.5, ys[i] >= 0.5, rp[i] < 0.0, rs[i] < 0.0];
            votes.iter().all(|&v| v == votes[0])
        })
        .collect()
}

/// Random voxel values with a share exactly on the thresholds.
fn tuple_values(rng: &mut ChaCha8Rng, n: usize, prob: bool) -> Vec<f64> {
    (0..n)
        .map(|_| match rng.gen_range(0..6) {
            0 if prob => 0.5,
            0 => 0.0,
            _ if prob => rng.gen_range(0.0..1.0),
            _ => rng.gen_range(-1.0..1.0),
        })
        .collect()
}

#[test]
fn confidence_mask_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1000;
    let (yp, ys) = (tuple_values(&mut rng, n, true), tuple_values(&mut rng, n, true));
    let (rp, rs) = (tuple_values(&mut rng, n, false), tuple_values(&mut rng, n, false));
    let want = scalar_mask(&yp, &ys, &rp, &rs);
    let mut t = Tape::new();
    let out = heads_from(&mut t, yp.clone(), ys.clone(), rp, rs);
    assert_eq!(confidence_mask(&t, &out, Heads::Both).data(), want.as_slice());
    let seg_only: Vec<bool> = yp.iter().zip(&ys).map(|(a, b)| (*a >= 0.5) == (*b >= 0.5)).collect();
    assert_eq!(confidence_mask(&t, &out, Heads::SegOnly).data(), seg_only.as_slice());
}

#[test]
fn self_consistent_prediction_gives_full_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 10;
    let p: Tensor<f64> = Tensor::from_fn(&[n, n, n], |_| rng.gen_range(0.0..1.0));
    let r = exact_signed(&p.threshold(0.5)).unwrap();
    let shape = [1, 1, n, n, n];
    let mut t = Tape::new();
    let y = t.constant(p.reshape(&shape).unwrap());
    let rv = t.constant(r.reshape(&shape).unwrap());
    let out = DualOutput {
        y_phi: y,
        y_psi: y,
        r_phi: rv,
        r_psi: rv,
    };
    assert!(confidence_mask(&t, &out, Heads::Both).data().iter().all(|&m| m));
}

#[test]
fn votes_break_ties_toward_foreground_probability() {
    assert!(prob_vote(0.5f64));
    assert!(!prob_vote(0.4999f64));
    assert!(!reg_vote(0.0f64));
    assert!(reg_vote(-1e-12f64));
}

#[test]
fn pseudo_label_is_detached_average() {
    let mut t = Tape::new();
    let mut out = heads_from(&mut t, vec![0.2, 0.9], vec![0.4, 0.5], vec![0.0; 2], vec![0.0; 2]);
    out.y_phi = t.param(Tensor::new(&[1, 1, 1, 1, 2], vec![0.2, 0.9]).unwrap());
    let soft = pseudo_label(&mut t, &out, false).unwrap();
    let hard = pseudo_label(&mut t, &out, true).unwrap();
    let sv = t.value(soft).data().to_vec();
    assert!((sv[0] - 0.3).abs() < 1e-15 && (sv[1] - 0.7).abs() < 1e-15);
    assert_eq!(t.value(hard).data(), &[0.0, 1.0]);
    let s = t.sum(soft).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(out.y_phi).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn pse_loss_with_empty_mask_is_zero() {
    let mut t = Tape::new();
    let out = heads_from(&mut t, vec![0.2, 0.9], vec![0.4, 0.5], vec![0.0; 2], vec![0.0; 2]);
    let yb = pseudo_label(&mut t, &out, false).unwrap();
    let m = Tensor::full(&[1, 1, 1, 1, 2], false);
    let l = pse_loss(&mut t, &out, yb, &m).unwrap();
    assert_eq!(t.item(l), 0.0);
}

#[test]
fn seg_loss_is_half_dice_half_bce() {
    let mut t = Tape::new();
    let p = t.constant(Tensor::new(&[1, 1, 1, 1, 3], vec![0.9, 0.2, 0.6]).unwrap());
    let y = t.constant(Tensor::new(&[1, 1, 1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap());
    let w = LossWeights::default();
    let (s, d, b) = (seg_loss(&mut t, p, y, &w).unwrap(), soft_dice_loss(&mut t, p, y).unwrap(), bce(&mut t, p, y).unwrap());
    let want_bce = -((0.9f64).ln() + (0.8f64).ln() + (0.4f64).ln()) / 3.0;
    let inter = 0.9;
    let want_dice = 1.0 - (2.0 * inter + 1e-5) / (0.9 + 0.2 + 0.6 + 1.0 + 1e-5);
    assert!((t.item(b) - want_bce).abs() < 1e-12);
    assert!((t.item(d) - want_dice).abs() < 1e-12);
    assert!((t.item(s) - 0.5 * (want_bce + want_dice)).abs() < 1e-12);
}

#[test]
fn beta_ramps_to_its_maximum() {
    let w = LossWeights::default();
    let ramp = w.ramp_for(2000);
    assert_eq!(ramp, 800);
    assert!((w.beta(0, ramp) - w.beta_max * (-5.0f64).exp()).abs() < 1e-15);
    assert_eq!(w.beta(ramp, ramp), w.beta_max);
    assert_eq!(w.beta(1999, ramp), w.beta_max);
    for t in 1..ramp {
        assert!(w.beta(t, ramp) >= w.beta(t - 1, ramp));
    }
}

#[test]
fn gradient_suites_pass() {
    let suites = gradient_suites(&TransformConfig::default(), &LossWeights::default(), 1).unwrap();
    assert_eq!(suites.len(), 6);
    for s in suites {
        assert!(s.passes(), "{}: {:?}", s.name, s.check);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn total_is_the_weighted_sum(seed in any::<u64>(), lambda in 0.0f64..2.0, beta in 0.0f64..2.0) {
        let conv = Converter::new(TransformConfig::default(), false).unwrap();
        let x = packed_input(&mut ChaCha8Rng::seed_from_u64(seed), 1);
        let mut t = Tape::new();
        let (p, _) = all_parts(&mut t, &x, &conv);
        let total = total_loss(&mut t, &p, lambda, beta).unwrap();
        let want = lambda * (t.item(p.sup_it) + t.item(p.sup_ct) + t.item(p.con_it) + t.item(p.con_ct)) + beta * t.item(p.pse);
        prop_assert!((t.item(total) - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn every_part_is_nonnegative(seed in any::<u64>()) {
        let conv = Converter::new(TransformConfig::default(), false).unwrap();
        let x = packed_input(&mut ChaCha8Rng::seed_from_u64(seed), 1);
        let mut t = Tape::new();
        let (p, _) = all_parts(&mut t, &x, &conv);
        for v in [p.sup_it, p.sup_ct, p.con_it, p.con_ct, p.pse] {
            prop_assert!(t.item(v) >= 0.0 && t.item(v).is_finite());
        }
    }

    #[test]
    fn consistency_vanishes_on_identical_branches(seed in any::<u64>()) {
        let x = packed_input(&mut ChaCha8Rng::seed_from_u64(seed), 1);
        let mut t = Tape::new();
        let v = t.constant(x);
        let out = unpack_heads(&mut t, v, 1, 1500.0).unwrap();
        let same = DualOutput { y_psi: out.y_phi, r_psi: out.r_phi, ..out };
        let c = con_intra(&mut t, &same, Heads::Both).unwrap();
        prop_assert_eq!(t.item(c.total), 0.0);
    }

    #[test]
    fn confidence_mask_matches_oracle(
        v in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..64)
    ) {
        let yp: Vec<f64> = v.iter().map(|t| t.0).collect();
        let ys: Vec<f64> = v.iter().map(|t| t.1).collect();
        let rp: Vec<f64> = v.iter().map(|t| t.2).collect();
        let rs: Vec<f64> = v.iter().map(|t| t.3).collect();
        let want = scalar_mask(&yp, &ys, &rp, &rs);
        let mut t = Tape::new();
        let out = heads_from(&mut t, yp, ys, rp, rs);
        let got = confidence_mask(&t, &out, Heads::Both);
        prop_assert_eq!(got.data(), want.as_slice());
    }
}
