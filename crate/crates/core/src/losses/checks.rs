//! Finite-difference suites for the converters and every loss, on 6³
//! inputs in 64-bit.
//!
//! Head outputs are packed into one input tensor `[4B, 1, n, n, n]`: the
//! first two blocks of `B` pass through a sigmoid (segmentation heads), the
//! last two are scaled by `1 / steepness` (regression heads) so that the
//! signed-map sigmoid works in its sensitive range. The pseudo-label and the
//! confidence mask are detached by contract; the `total_loss` suite freezes
//! them at the unperturbed input. Coordinates whose perturbation flips a
//! source set, clamp, select or extremum are skipped by the checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dtrans::{exact_signed, t_r2s, t_s2r, Converter, TransformConfig};
use crate::tensor::gradcheck::{finite_diff_check, GradCheck};

/// Tolerance on the max relative error.
pub const GRAD_TOL: f64 = 1e-4;
pub const CUBE: usize = 6;

/// Result of one suite.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub check: GradCheck,
}

impl SuiteResult {
    pub fn passes(&self) -> bool {
        self.check.passes(GRAD_TOL)
    }
}

fn shape(b: usize) -> [usize; 5] {
    [b, 1, CUBE, CUBE, CUBE]
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// A smooth blob with noise: a probability map with a clear interior.
fn soft_blob(rng: &mut ChaCha8Rng, b: usize) -> Tensor<f64> {
    let n = CUBE;
    let c = (n as f64 - 1.0) / 2.0;
    Tensor::from_fn(&shape(b), |i| {
        let j = i % (n * n * n);
        let (z, y, x) = (j / (n * n), (j / n) % n, j % n);
        let r = ((z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
        let base = 1.0 / (1.0 + (2.0 * (r - 1.6)).exp());
        (base * 0.9 + rng.gen_range(0.02..0.08)).min(0.97)
    })
}

fn ball_mask(b: usize) -> Tensor<bool> {
    let n = CUBE;
    let c = (n as f64 - 1.0) / 2.0;
    Tensor::from_fn(&shape(b), |i| {
        let j = i % (n * n * n);
        let (z, y, x) = (j / (n * n), (j / n) % n, j % n);
        (z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2) <= 1.6 * 1.6
    })
}

/// Logits of a probability map, so that sigmoid(logit) reproduces it.
fn logit(p: &Tensor<f64>) -> Tensor<f64> {
    p.map(|&v| (v / (1.0 - v)).ln())
}

/// Head outputs from a packed input with `b` samples per head.
pub fn unpack_heads(tape: &mut Tape<f64>, x: Var, b: usize, steepness: f64) -> Result<DualOutput> {
    let mut block = |k: usize| -> Result<Var> {
        let parts = (k * b..(k + 1) * b).map(|i| tape.slice_batch(x, i)).collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(&parts)
        }
    };
    let (a, c, d, e) = (block(0)?, block(1)?, block(2)?, block(3)?);
    Ok(DualOutput {
        y_phi: tape.sigmoid(a)?,
        y_psi: tape.sigmoid(c)?,
        r_phi: tape.mul_scalar(d, 1.0 / steepness)?,
        r_psi: tape.mul_scalar(e, 1.0 / steepness)?,
    })
}

/// Packed input: segmentation logits around a soft blob, regression raw
/// values in the sensitive band.
pub fn packed_input(rng: &mut ChaCha8Rng, b: usize) -> Tensor<f64> {
    let mut data = Vec::new();
    for _ in 0..2 {
        data.extend(logit(&soft_blob(rng, b)).into_data());
    }
    for _ in 0..2 {
        data.extend(rand_tensor(rng, &shape(b), -3.0, 3.0).into_data());
    }
    Tensor::new(&shape(4 * b), data).expect("sizes match")
}

/// Runs every suite.
pub fn gradient_suites(tcfg: &TransformConfig, w: &LossWeights, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = tcfg.kernel()?;
    let conv = Converter::new(tcfg.clone(), false)?;
    let k = tcfg.steepness;
    let mut out = Vec::new();
    let mut push = |name, check| out.push(SuiteResult { name, check });

    let weights = rand_tensor(&mut rng, &shape(1), 0.5, 1.5);
    let x = soft_blob(&mut rng, 1);
    push(
        "t_s2r",
        finite_diff_check(
            |t, v| {
                let s = t_s2r(t, v, &kernel, tcfg)?;
                let wv = t.constant(weights.clone());
                let p = t.mul(s, wv)?;
                t.sum(p)
            },
            &x,
            1e-4,
        )?,
    );

    let x = rand_tensor(&mut rng, &shape(1), -3.0 / k, 3.0 / k);
    push(
        "t_r2s",
        finite_diff_check(
            |t, v| {
                let s = t_r2s(t, v, k)?;
                let wv = t.constant(weights.clone());
                let p = t.mul(s, wv)?;
                t.sum(p)
            },
            &x,
            1e-3 / k,
        )?,
    );

    let target = rand_tensor(&mut rng, &shape(1), 0.0, 1.0).threshold(0.5).to_float::<f64>();
    let x = logit(&soft_blob(&mut rng, 1));
    push(
        "seg_loss",
        finite_diff_check(
            |t, v| {
                let p = t.sigmoid(v)?;
                let y = t.constant(target.clone());
                seg_loss(t, p, y, w)
            },
            &x,
            1e-4,
        )?,
    );

    let y = ball_mask(1);
    let r = exact_signed(&y)?;
    let yf = y.to_float::<f64>();
    let x = packed_input(&mut rng, 1);
    push(
        "sup_cross",
        finite_diff_check(
            |t, v| {
                let out = unpack_heads(t, v, 1, k)?;
                let (yv, rv) = (t.constant(yf.clone()), t.constant(r.clone()));
                Ok(sup_cross(t, &out, yv, rv, &conv, w)?.total)
            },
            &x,
            1e-4,
        )?,
    );

    let x = packed_input(&mut rng, 1);
    push(
        "con_cross",
        finite_diff_check(
            |t, v| {
                let out = unpack_heads(t, v, 1, k)?;
                Ok(con_cross(t, &out, &conv)?.total)
            },
            &x,
            1e-4,
        )?,
    );

    // two samples per head: the first labeled, the second unlabeled
    let x = packed_input(&mut rng, 2);
    let (ybar, mask) = {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let o = unpack_heads(&mut t, v, 2, k)?;
        let yb = pseudo_label(&mut t, &o, false)?;
        (t.value(yb).clone(), confidence_mask(&t, &o, Heads::Both))
    };
    let beta = w.beta(3, 10);
    push(
        "total_loss",
        finite_diff_check(
            |t, v| {
                let out = unpack_heads(t, v, 2, k)?;
                let lab = DualOutput {
                    y_phi: t.slice_batch(out.y_phi, 0)?,
                    y_psi: t.slice_batch(out.y_psi, 0)?,
                    r_phi: t.slice_batch(out.r_phi, 0)?,
                    r_psi: t.slice_batch(out.r_psi, 0)?,
                };
                let (yv, rv) = (t.constant(yf.clone()), t.constant(r.clone()));
                let parts = Parts {
                    sup_it: sup_intra(t, &lab, yv, rv, w, Heads::Both)?.total,
                    sup_ct: sup_cross(t, &lab, yv, rv, &conv, w)?.total,
                    con_it: con_intra(t, &out, Heads::Both)?.total,
                    con_ct: con_cross(t, &out, &conv)?.total,
                    pse: {
                        let yb = t.constant(ybar.clone());
                        pse_loss(t, &out, yb, &mask)?
                    },
                };
                total_loss(t, &parts, w.lambda, beta)
            },
            &x,
            1e-4,
        )?,
    );
    Ok(out)
}
