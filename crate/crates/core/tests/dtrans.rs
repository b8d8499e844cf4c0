use dualdist::dtrans::{
    approx_dt, approx_dt_value, exact_edt, exact_signed, r2s_value, resample, s2r_value, t_r2s, t_s2r, Kernel,
    TransformConfig,
};
use dualdist::tensor::gradcheck::finite_diff_check;
use dualdist::tensor::idx3;
use dualdist::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ball(n: usize, center: [f64; 3], radius: f64) -> Tensor<bool> {
    Tensor::from_fn(&[n, n, n], |i| {
        let (z, y, x) = (i / (n * n), (i / n) % n, i % n);
        let d2 = (z as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2) + (x as f64 - center[2]).powi(2);
        d2 <= radius * radius
    })
}

fn dice(a: &Tensor<bool>, b: &Tensor<bool>) -> f64 {
    let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count() as f64;
    2.0 * inter / (a.count() + b.count()) as f64
}

/// Spearman correlation via average ranks, written independently of the
/// library's metric helpers.
fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn fixed_conv_matches_naive_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 6;
    let input: Tensor<f64> = Tensor::from_fn(&[1, 1, n, n, n], |_| rng.gen_range(-1.0..1.0));
    let kernel = Tensor::from_fn(&[3, 3, 3], |_| rng.gen_range(0.0..1.0));
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = tape.conv3d_fixed(x, &kernel).unwrap();
    let out = tape.value(y).data().to_vec();

    let clamp = |v: isize| v.clamp(0, n as isize - 1) as usize;
    for z in 0..n {
        for yy in 0..n {
            for xx in 0..n {
                let mut acc = 0.0f64;
                for dz in 0..3 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let iz = clamp(z as isize + dz as isize - 1);
                            let iy = clamp(yy as isize + dy as isize - 1);
                            let ix = clamp(xx as isize + dx as isize - 1);
                            acc += kernel.data()[(dz * 3 + dy) * 3 + dx] * input.data()[idx3([n; 3], iz, iy, ix)];
                        }
                    }
                }
                let got = out[idx3([n; 3], z, yy, xx)];
                assert!((got - acc).abs() < 1e-12, "({z},{yy},{xx}) {got} vs {acc}");
            }
        }
    }
}

#[test]
fn approx_dt_all_sources_is_zero() {
    let cfg = TransformConfig::default();
    let d = approx_dt_value(&Tensor::<f64>::ones(&[6, 6, 6]), &cfg).unwrap();
    assert!(d.data().iter().all(|&v| v == 0.0));
}

#[test]
fn approx_dt_without_source_errors() {
    let cfg = TransformConfig::default();
    let r = approx_dt_value(&Tensor::<f64>::zeros(&[4, 4, 4]), &cfg);
    assert_eq!(r, Err(dualdist::Error::NoSource));
}

#[test]
fn approx_dt_is_monotone_along_rays() {
    let cfg = TransformConfig::default();
    let n = 9;
    let mut src = Tensor::<f64>::zeros(&[n, n, n]);
    src.data_mut()[idx3([n; 3], 4, 4, 4)] = 1.0;
    let d = approx_dt_value(&src, &cfg).unwrap();
    let at = |z: isize, y: isize, x: isize| d.data()[idx3([n; 3], z as usize, y as usize, x as usize)];
    let dirs: Vec<(isize, isize, isize)> = (-1..=1)
        .flat_map(|a| (-1..=1).flat_map(move |b| (-1..=1).map(move |c| (a, b, c))))
        .filter(|&v| v != (0, 0, 0))
        .collect();
    for (a, b, c) in dirs {
        let mut prev = at(4, 4, 4);
        assert_eq!(prev, 0.0);
        for s in 1..=4 {
            let v = at(4 + a * s, 4 + b * s, 4 + c * s);
            assert!(v >= prev, "ray ({a},{b},{c}) step {s}: {v} < {prev}");
            prev = v;
        }
    }
}

/// Regression guard on the approximation quality of the default settings.
/// The propagation advances one Chebyshev ring per pass, so diagonal
/// distances are underestimated; these bounds track the observed behavior.
#[test]
fn approx_dt_stays_close_to_exact_edt() {
    let cfg = TransformConfig::default();
    let n = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let mut mask = Tensor::full(&[n, n, n], false);
        for _ in 0..3 {
            let i = rng.gen_range(0..n * n * n);
            mask.data_mut()[i] = true;
        }
        let exact = exact_edt(&mask).unwrap();
        let approx = approx_dt_value(&mask.to_float::<f64>(), &cfg).unwrap();
        let mae: f64 =
            exact.data().iter().zip(approx.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / exact.numel() as f64;
        let rho = spearman(exact.data(), approx.data());
        assert!(mae <= 2.0, "mae {mae}");
        assert!(rho >= 0.95, "rho {rho}");
    }
}

#[test]
fn signed_map_sign_convention_on_ball() {
    let cfg = TransformConfig::default();
    let n = 24;
    let mask = ball(n, [11.5, 11.5, 11.5], 7.0);
    let r = s2r_value(&mask.to_float::<f64>(), &cfg, false).unwrap();
    let dist_in = exact_edt(&mask.map(|&m| !m)).unwrap();
    let dist_out = exact_edt(&mask).unwrap();
    for i in 0..mask.numel() {
        let v = r.data()[i];
        assert!((-1.0..=1.0).contains(&v));
        if mask.data()[i] {
            assert!(v < 0.0, "interior voxel {i} has {v} (depth {})", dist_in.data()[i]);
        } else {
            assert!(v > 0.0, "exterior voxel {i} has {v} (dist {})", dist_out.data()[i]);
        }
    }
}

#[test]
fn swapping_foreground_flips_sign() {
    let cfg = TransformConfig::default();
    let n = 16;
    let mask = ball(n, [7.0, 8.0, 7.5], 5.0);
    let r = s2r_value(&mask.to_float::<f64>(), &cfg, false).unwrap();
    let rs = s2r_value(&mask.map(|&m| !m).to_float::<f64>(), &cfg, false).unwrap();
    for (a, b) in r.data().iter().zip(rs.data()) {
        assert_eq!(a.signum(), -b.signum());
        assert!((a + b).abs() < 1e-12);
    }
}

#[test]
fn roundtrip_recovers_ball() {
    let cfg = TransformConfig::default();
    let mask = ball(24, [12.0, 11.0, 12.5], 8.0);
    let r = s2r_value(&mask.to_float::<f64>(), &cfg, false).unwrap();
    let back = r2s_value(&r, cfg.steepness).threshold(0.5);
    assert!(dice(&back, &mask) >= 0.99);

    let exact = exact_signed(&mask).unwrap();
    let back = r2s_value(&exact, cfg.steepness).threshold(0.5);
    assert_eq!(dice(&back, &mask), 1.0);
}

#[test]
fn roundtrip_with_resampling() {
    let cfg = TransformConfig::default();
    let mask = ball(32, [15.0, 16.0, 15.5], 9.0);
    let r = s2r_value(&mask.to_float::<f64>(), &cfg, true).unwrap();
    assert_eq!(r.shape(), mask.shape());
    let back = r2s_value(&r, cfg.steepness).threshold(0.5);
    assert!(dice(&back, &mask) >= 0.93, "{}", dice(&back, &mask));
}

#[test]
fn r2s_values() {
    let r = Tensor::new(&[3], vec![0.0f64, -1.0, 1.0]).unwrap();
    let p = r2s_value(&r, 1500.0);
    assert_eq!(p.data()[0], 0.5);
    assert!(p.data()[1] > 1.0 - 1e-12);
    assert!(p.data()[2] < 1e-12);
}

#[test]
fn degenerate_inputs_give_zero_signed_map() {
    let cfg = TransformConfig::default();
    for fill in [0.0, 1.0] {
        let r = s2r_value(&Tensor::<f64>::full(&[6, 6, 6], fill), &cfg, false).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
        let e = exact_signed(&Tensor::full(&[6, 6, 6], fill == 1.0)).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn exact_signed_is_monotone_from_center() {
    let n = 21;
    let mask = ball(n, [10.0, 10.0, 10.0], 6.0);
    let s = exact_signed(&mask).unwrap();
    assert!(s.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    let mut prev = f64::NEG_INFINITY;
    for x in 10..n {
        let v = s.data()[idx3([n; 3], 10, 10, x)];
        assert!(v >= prev);
        prev = v;
    }
    for i in 0..mask.numel() {
        let v = s.data()[i];
        assert_eq!(v < 0.0, mask.data()[i]);
    }
}

#[test]
fn resample_identity_and_constants() {
    let mut tape = Tape::<f64>::new();
    let v = Tensor::from_fn(&[1, 1, 6, 6, 6], |i| i as f64 * 0.1);
    let x = tape.constant(v.clone());
    let same = resample(&mut tape, x, 1.0).unwrap();
    assert_eq!(tape.value(same), &v);

    let c = tape.constant(Tensor::full(&[1, 1, 8, 6, 10], 0.375));
    let down = resample(&mut tape, c, 0.5).unwrap();
    assert_eq!(tape.shape(down), &[1, 1, 4, 3, 5]);
    let up = tape.resample(down, [8, 6, 10]).unwrap();
    assert!(tape.value(up).data().iter().all(|&v| (v - 0.375).abs() < 1e-15));
    assert!(resample(&mut tape, c, 0.0).is_err());
}

fn soft_blob(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (n as f64 - 1.0) / 2.0;
    Tensor::from_fn(&[1, 1, n, n, n], |i| {
        let (z, y, x) = (i / (n * n), (i / n) % n, i % n);
        let r = ((z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
        let base = 1.0 / (1.0 + (2.0 * (r - 1.6)).exp());
        (base * 0.9 + rng.gen_range(0.02..0.08)).min(0.97)
    })
}

#[test]
fn t_s2r_gradient_matches_finite_differences() {
    let cfg = TransformConfig::default();
    let kernel = cfg.kernel().unwrap();
    let x = soft_blob(6, 3);
    let r = finite_diff_check(
        |t, v| {
            let s = t_s2r(t, v, &kernel, &cfg)?;
            t.sum(s)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn t_r2s_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[1, 1, 4, 4, 4], |_| rng.gen_range(-0.004..0.004));
    let r = finite_diff_check(
        |t, v| {
            let s = t_r2s(t, v, 1500.0)?;
            t.sum(s)
        },
        &x,
        1e-7,
    )
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn approx_dt_gradient_with_hard_background() {
    // zeros are non-sources; perturbing them toggles the source set and is excluded
    let cfg = TransformConfig::default();
    let kernel = Kernel::new(3, 0.35).unwrap();
    let n = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(&[1, 1, n, n, n], |i| if i % 17 == 0 { rng.gen_range(0.5..1.0) } else { 0.0 });
    let r = finite_diff_check(
        |t, v| {
            let d = approx_dt(t, v, &kernel, &cfg)?;
            t.sum(d)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.checked > 0 && r.skipped > 0, "{r:?}");
    assert!(r.passes(1e-4), "{r:?}");
}
