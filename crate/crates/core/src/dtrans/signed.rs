//! Signed distance maps and the two converters between probability maps and
//! signed maps.

use super::approx::{approx_dt, as_volume_batch};
use super::edt::{exact_edt, split_blocks};
use super::{Kernel, TransformConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Interior and exterior distance fields of one probability map.
#[derive(Clone, Debug)]
pub struct SignedDistanceParts {
    /// distance to the foreground (zero inside the object)
    pub s_in: Var,
    /// distance to the background (zero outside the object)
    pub s_out: Var,
}

/// Min-max normalization to `[0, 1]`; a constant field maps to all zeros.
fn normalize<T: Scalar>(tape: &mut Tape<T>, s: Var) -> Result<Var> {
    let lo = tape.min(s)?;
    let hi = tape.max(s)?;
    if tape.item(hi) - tape.item(lo) <= T::zero() {
        return Ok(tape.constant(Tensor::zeros(tape.shape(s))));
    }
    let range = tape.sub(hi, lo)?;
    let shifted = tape.sub(s, lo)?;
    tape.div(shifted, range)
}

fn dt_or_zero<T: Scalar>(tape: &mut Tape<T>, src: Var, kernel: &Kernel, cfg: &TransformConfig) -> Result<Var> {
    match approx_dt(tape, src, kernel, cfg) {
        Err(Error::NoSource) => Ok(tape.constant(Tensor::zeros(tape.shape(src)))),
        r => r,
    }
}

/// Both distance fields of a single-sample `[1,1,D,H,W]` probability map.
pub fn signed_parts<T: Scalar>(tape: &mut Tape<T>, prob: Var, kernel: &Kernel, cfg: &TransformConfig) -> Result<SignedDistanceParts> {
    let s_in = dt_or_zero(tape, prob, kernel, cfg)?;
    let inv = tape.rsub_scalar(T::one(), prob)?;
    let s_out = dt_or_zero(tape, inv, kernel, cfg)?;
    Ok(SignedDistanceParts { s_in, s_out })
}

/// Probability map `[B,1,D,H,W]` to signed map in `[-1, 1]`, negative inside.
///
/// Per sample: `norm(DT(p)) - norm(DT(1 - p))` with min-max normalization
/// over the sample. All-foreground or all-background samples give zeros.
pub fn t_s2r<T: Scalar>(tape: &mut Tape<T>, prob: Var, kernel: &Kernel, cfg: &TransformConfig) -> Result<Var> {
    let shape = tape.shape(prob).to_vec();
    if shape.len() != 5 || shape[1] != 1 {
        return Err(Error::ShapeMismatch {
            op: "t_s2r",
            left: shape,
            right: vec![0, 1, 0, 0, 0],
        });
    }
    let mut parts = Vec::with_capacity(shape[0]);
    for b in 0..shape[0] {
        let p = if shape[0] == 1 { prob } else { tape.slice_batch(prob, b)? };
        let sp = signed_parts(tape, p, kernel, cfg)?;
        let n_in = normalize(tape, sp.s_in)?;
        let n_out = normalize(tape, sp.s_out)?;
        parts.push(tape.sub(n_in, n_out)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(&parts)
    }
}

/// Spatial dims after scaling by `rate` (floor, at least 1).
pub fn scaled_dims(dims: [usize; 3], rate: f64) -> [usize; 3] {
    dims.map(|n| ((n as f64 * rate).floor() as usize).max(1))
}

/// Trilinear downsampling by `rate` in `(0, 1]`.
pub fn resample<T: Scalar>(tape: &mut Tape<T>, x: Var, rate: f64) -> Result<Var> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidConfig(format!("resample rate {rate} outside (0, 1]")));
    }
    let dims = tape.value(x).spatial_dims();
    tape.resample(x, scaled_dims(dims, rate))
}

/// Trilinear resampling back to an explicit spatial shape.
pub fn resample_back<T: Scalar>(tape: &mut Tape<T>, x: Var, target: [usize; 3]) -> Result<Var> {
    tape.resample(x, target)
}

/// [`t_s2r`] evaluated on a grid downsampled by `cfg.down_rate`, with the
/// signed map upsampled back to the input resolution.
pub fn t_s2r_resampled<T: Scalar>(tape: &mut Tape<T>, prob: Var, kernel: &Kernel, cfg: &TransformConfig) -> Result<Var> {
    if cfg.down_rate >= 1.0 {
        return t_s2r(tape, prob, kernel, cfg);
    }
    let dims = tape.value(prob).spatial_dims();
    let small = resample(tape, prob, cfg.down_rate)?;
    let r = t_s2r(tape, small, kernel, cfg)?;
    resample_back(tape, r, dims)
}

/// Signed map to foreground probability: `sigmoid(-k * r)`, so negative
/// (interior) distances map above 0.5.
pub fn t_r2s<T: Scalar>(tape: &mut Tape<T>, reg: Var, steepness: f64) -> Result<Var> {
    let scaled = tape.mul_scalar(reg, T::of(-steepness))?;
    tape.sigmoid(scaled)
}

fn normalize_values(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        v.fill(0.0);
    } else {
        for x in v.iter_mut() {
            *x = (*x - lo) / (hi - lo);
        }
    }
}

/// Exact signed map of a binary mask with the same normalization and
/// degenerate rules as [`t_s2r`]. Leading axes are independent volumes.
pub fn exact_signed(mask: &Tensor<bool>) -> Result<Tensor<f64>> {
    let (blocks, dims) = split_blocks(mask.shape());
    let sz: usize = dims.iter().product();
    let mut out = Vec::with_capacity(mask.numel());
    for b in 0..blocks {
        let m = Tensor::new(&dims, mask.data()[b * sz..(b + 1) * sz].to_vec())?;
        let inv = m.map(|&v| !v);
        let mut s_in = match exact_edt(&m) {
            Ok(d) => d.into_data(),
            Err(Error::NoSource) => vec![0.0; sz],
            Err(e) => return Err(e),
        };
        let mut s_out = match exact_edt(&inv) {
            Ok(d) => d.into_data(),
            Err(Error::NoSource) => vec![0.0; sz],
            Err(e) => return Err(e),
        };
        normalize_values(&mut s_in);
        normalize_values(&mut s_out);
        out.extend(s_in.iter().zip(&s_out).map(|(a, b)| a - b));
    }
    Tensor::new(mask.shape(), out)
}

/// Value-only [`t_s2r`] (optionally resampled) for a `[D,H,W]` or
/// `[B,1,D,H,W]` probability map.
pub fn s2r_value<T: Scalar>(prob: &Tensor<T>, cfg: &TransformConfig, resampled: bool) -> Result<Tensor<T>> {
    let kernel = cfg.kernel()?;
    let orig = prob.shape().to_vec();
    let mut tape = Tape::new();
    let x = tape.constant(as_volume_batch(prob.clone())?);
    let r = if resampled {
        t_s2r_resampled(&mut tape, x, &kernel, cfg)?
    } else {
        t_s2r(&mut tape, x, &kernel, cfg)?
    };
    tape.value(r).clone().reshape(&orig)
}

/// Value-only [`t_r2s`].
pub fn r2s_value<T: Scalar>(reg: &Tensor<T>, steepness: f64) -> Tensor<T> {
    let k = T::of(-steepness);
    reg.map(|&r| crate::tensor::sigmoid(k * r))
}
