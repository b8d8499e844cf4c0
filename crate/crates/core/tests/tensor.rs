use dualdist::tensor::gradcheck::finite_diff_check;
use dualdist::tensor::idx3;
use dualdist::{Tape, Tensor};
use proptest::prelude::*;

/// Direct loop over output voxels, zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (nb, ci, co, k) = (xs[0], xs[1], ws[0], ws[2]);
    let din = [xs[2], xs[3], xs[4]];
    let dout = din.map(|d| (d + 2 * pad - k) / stride + 1);
    let mut out = vec![0.0; nb * co * dout.iter().product::<usize>()];
    let mut o = 0;
    for n in 0..nb {
        for c in 0..co {
            for z in 0..dout[0] {
                for y in 0..dout[1] {
                    for xx in 0..dout[2] {
                        let mut acc = b[c];
                        for i in 0..ci {
                            for (dz, dy, dx) in (0..k).flat_map(|a| (0..k).flat_map(move |b| (0..k).map(move |c| (a, b, c)))) {
                                let p = [z * stride + dz, y * stride + dy, xx * stride + dx];
                                if (0..3).any(|a| p[a] < pad || p[a] - pad >= din[a]) {
                                    continue;
                                }
                                let xi = ((n * ci + i) * din.iter().product::<usize>())
                                    + idx3(din, p[0] - pad, p[1] - pad, p[2] - pad);
                                let wi = ((c * ci + i) * k * k * k) + idx3([k; 3], dz, dy, dx);
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                        out[o] = acc;
                        o += 1;
                    }
                }
            }
        }
    }
    Tensor::new(&[nb, co, dout[0], dout[1], dout[2]], out).unwrap()
}

/// Scatter form: each input voxel paints a 2³ block.
fn naive_conv_t(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (nb, ci, co) = (xs[0], xs[1], ws[1]);
    let din = [xs[2], xs[3], xs[4]];
    let dout = din.map(|d| 2 * d);
    let vo: usize = dout.iter().product();
    let mut out = vec![0.0; nb * co * vo];
    for n in 0..nb {
        for i in 0..ci {
            for z in 0..din[0] {
                for y in 0..din[1] {
                    for xx in 0..din[2] {
                        let v = x.data()[(n * ci + i) * din.iter().product::<usize>() + idx3(din, z, y, xx)];
                        for c in 0..co {
                            for (dz, dy, dx) in (0..2).flat_map(|a| (0..2).flat_map(move |b| (0..2).map(move |c| (a, b, c)))) {
                                let wi = ((i * co + c) * 8) + idx3([2; 3], dz, dy, dx);
                                out[(n * co + c) * vo + idx3(dout, 2 * z + dz, 2 * y + dy, 2 * xx + dx)] += v * w.data()[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[nb, co, dout[0], dout[1], dout[2]], out).unwrap()
}

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn shape_errors_are_reported() {
    assert!(Tensor::new(&[2, 2], vec![1.0f64; 3]).is_err());
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(tape.add(a, b).is_err());
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3, 3]));
    assert!(tape.conv3d(x, w, None, 1, 1).is_err());
}

#[test]
fn backward_is_single_use() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(&[3]));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.backward(s).is_err());
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let sq = tape.square(x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(&[2]));
    let d = tape.detach(x);
    let y = tape.mul(x, d).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    // d/dx of x * stopgrad(x) is stopgrad(x)
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn resample_preserves_constants_and_identity() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full(&[1, 1, 6, 5, 4], 0.7));
    let r = tape.resample(c, [3, 7, 2]).unwrap();
    assert!(tape.value(r).data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    let t = tensor(&[1, 1, 4, 4, 4], 3);
    let x = tape.constant(t.clone());
    let same = tape.resample(x, [4, 4, 4]).unwrap();
    assert_eq!(tape.value(same), &t);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv3d_matches_loop_oracle(
        seed in 0u64..1000,
        ci in 1usize..3,
        co in 1usize..3,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        d in 3usize..6,
    ) {
        let pad = k / 2;
        let x = tensor(&[2, ci, d, d + 1, d], seed);
        let w = tensor(&[co, ci, k, k, k], seed + 1);
        let b = tensor(&[co], seed + 2);
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv3d(vx, vw, Some(vb), stride, pad).unwrap();
        let want = naive_conv(&x, &w, b.data(), stride, pad);
        prop_assert_eq!(tape.shape(y), want.shape());
        prop_assert!(close(tape.value(y).data(), want.data(), 1e-12));
    }

    #[test]
    fn conv_transpose_matches_scatter_oracle(seed in 0u64..1000, ci in 1usize..3, co in 1usize..3, d in 1usize..4) {
        let x = tensor(&[1, ci, d, d, d + 1], seed);
        let w = tensor(&[ci, co, 2, 2, 2], seed + 7);
        let mut tape = Tape::new();
        let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv_transpose3d(vx, vw, None).unwrap();
        let want = naive_conv_t(&x, &w);
        prop_assert_eq!(tape.shape(y), want.shape());
        prop_assert!(close(tape.value(y).data(), want.data(), 1e-12));
    }

    #[test]
    fn conv3d_gradients_match_finite_differences(seed in 0u64..1000, stride in 1usize..3) {
        let w = tensor(&[2, 1, 3, 3, 3], seed + 1);
        let x = tensor(&[1, 1, 4, 4, 4], seed);
        let wrt_x = finite_diff_check(|t, v| {
            let wv = t.constant(w.clone());
            let y = t.conv3d(v, wv, None, stride, 1)?;
            let sq = t.square(y)?;
            t.mean(sq)
        }, &x, 1e-6).unwrap();
        prop_assert!(wrt_x.passes(1e-4), "{:?}", wrt_x);
        let wrt_w = finite_diff_check(|t, v| {
            let xv = t.constant(x.clone());
            let y = t.conv3d(xv, v, None, stride, 1)?;
            let sq = t.square(y)?;
            t.mean(sq)
        }, &w, 1e-6).unwrap();
        prop_assert!(wrt_w.passes(1e-4), "{:?}", wrt_w);
    }

    #[test]
    fn norm_and_resample_gradients_match_finite_differences(seed in 0u64..1000) {
        let x = tensor(&[1, 2, 3, 4, 3], seed);
        let probe = tensor(&[1, 2, 5, 2, 4], seed + 3);
        let r = finite_diff_check(|t, v| {
            let n = t.instance_norm(v, 1e-5)?;
            let s = t.resample(n, [5, 2, 4])?;
            let p = t.constant(probe.clone());
            let m = t.mul(s, p)?;
            let th = t.tanh(m)?;
            t.sum(th)
        }, &x, 1e-6).unwrap();
        prop_assert!(r.passes(1e-4), "{:?}", r);
    }

    #[test]
    fn instance_norm_standardizes(seed in 0u64..1000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let x = tensor(&[2, 3, 3, 3, 3], seed).map(|v| v * scale + shift);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let n = tape.instance_norm(v, 0.0).unwrap();
        for block in tape.value(n).data().chunks(27) {
            let mean = block.iter().sum::<f64>() / 27.0;
            let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 27.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reshape_keeps_data(v in proptest::collection::vec(-1e3f64..1e3, 24)) {
        let t = Tensor::new(&[2, 3, 4], v.clone()).unwrap();
        let r = t.clone().reshape(&[4, 6]).unwrap();
        prop_assert_eq!(r.data(), &v[..]);
        prop_assert!(t.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn elementwise_ops_match_scalar_math(a in proptest::collection::vec(-3f64..3.0, 6), b in proptest::collection::vec(0.1f64..3.0, 6)) {
        let mut tape = Tape::new();
        let va = tape.constant(Tensor::new(&[6], a.clone()).unwrap());
        let vb = tape.constant(Tensor::new(&[6], b.clone()).unwrap());
        let s = tape.add(va, vb).unwrap();
        let d = tape.div(va, vb).unwrap();
        let l = tape.log(vb).unwrap();
        let g = tape.sigmoid(va).unwrap();
        for i in 0..6 {
            prop_assert_eq!(tape.value(s).data()[i], a[i] + b[i]);
            prop_assert_eq!(tape.value(d).data()[i], a[i] / b[i]);
            prop_assert!((tape.value(l).data()[i] - b[i].ln()).abs() < 1e-15);
            prop_assert!((tape.value(g).data()[i] - 1.0 / (1.0 + (-a[i]).exp())).abs() < 1e-15);
        }
    }
}
