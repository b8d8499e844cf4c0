//! Differentiable approximate distance transform by chunked soft-min
//! propagation with the radial kernel.

use super::{Kernel, TransformConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Floor applied to the kernel response before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Iteration count used when `n_iters` is left on auto.
pub fn auto_iterations(dims: [usize; 3], kernel: &Kernel) -> usize {
    let m = dims.iter().copied().max().unwrap_or(1);
    m.div_ceil(kernel.radius())
}

/// Approximate distance from each voxel to the nearest source.
///
/// `source` is `[B, 1, D, H, W]` with values in `[0, 1]`. Voxels above
/// `cfg.source_epsilon` are sources and seed the frontier with their own
/// value. Each pass correlates the frontier with the kernel, turns the
/// response into a local distance `-h ln(c)`, and assigns
/// `pass * radius + local` to voxels reached for the first time, which then
/// join the frontier with weight 1. Gradients reach the original source
/// values through the first passes.
pub fn approx_dt<T: Scalar>(tape: &mut Tape<T>, source: Var, kernel: &Kernel, cfg: &TransformConfig) -> Result<Var> {
    let shape = tape.shape(source).to_vec();
    if shape.len() != 5 || shape[1] != 1 {
        return Err(Error::ShapeMismatch {
            op: "approx_dt",
            left: shape,
            right: vec![0, 1, 0, 0, 0],
        });
    }
    let n = tape.value(source).numel();
    let block = n / shape[0];
    let eps = T::of(cfg.source_epsilon);
    let is_source = tape.value(source).map(|&v| v > eps);
    for b in 0..shape[0] {
        if !is_source.data()[b * block..(b + 1) * block].iter().any(|&s| s) {
            return Err(Error::NoSource);
        }
    }

    let weights = kernel.weights_as::<T>();
    let dims = [shape[2], shape[3], shape[4]];
    let iters = cfg.n_iters.unwrap_or_else(|| auto_iterations(dims, kernel));
    let zeros = tape.constant(Tensor::zeros(&shape));
    let ones = tape.constant(Tensor::ones(&shape));
    let neg_h = T::of(-kernel.bandwidth());

    let mut frontier = tape.select(&is_source, source, zeros)?;
    let mut out = zeros;
    let mut assigned = vec![false; n];
    for pass in 0..iters {
        let c = tape.conv3d_fixed(frontier, &weights)?;
        let cc = tape.clamp(c, T::of(LOG_FLOOR), T::max_value())?;
        let lg = tape.log(cc)?;
        let local = tape.mul_scalar(lg, neg_h)?;

        let cv = tape.value(c).data();
        let dv = tape.value(local).data();
        let mut newly = vec![false; n];
        let mut any = false;
        for j in 0..n {
            if assigned[j] || cv[j] <= T::zero() {
                continue;
            }
            assigned[j] = true;
            any = true;
            // d <= 0 only where the voxel is itself a strong source
            newly[j] = dv[j] > T::zero();
        }
        if !any {
            break;
        }
        let newly = Tensor::new(&shape, newly)?;
        let cand = tape.add_scalar(local, T::of((pass * kernel.radius()) as f64))?;
        out = tape.select(&newly, cand, out)?;
        frontier = tape.select(&newly, ones, frontier)?;
        if assigned.iter().all(|&a| a) {
            break;
        }
    }
    Ok(out)
}

/// Value-only convenience wrapper around [`approx_dt`] for a `[B,1,D,H,W]`
/// or bare `[D,H,W]` soft mask.
pub fn approx_dt_value<T: Scalar>(source: &Tensor<T>, cfg: &TransformConfig) -> Result<Tensor<T>> {
    let kernel = cfg.kernel()?;
    let orig = source.shape().to_vec();
    let v = as_volume_batch(source.clone())?;
    let mut tape = Tape::new();
    let x = tape.constant(v);
    let d = approx_dt(&mut tape, x, &kernel, cfg)?;
    tape.value(d).clone().reshape(&orig)
}

/// Views a `[D,H,W]` (or already 5-D) tensor as `[B,1,D,H,W]`.
pub(crate) fn as_volume_batch<T: Clone>(t: Tensor<T>) -> Result<Tensor<T>> {
    match t.shape().len() {
        5 => Ok(t),
        3 => {
            let s = t.shape().to_vec();
            t.reshape(&[1, 1, s[0], s[1], s[2]])
        }
        4 => {
            let s = t.shape().to_vec();
            t.reshape(&[s[0], 1, s[1], s[2], s[3]])
        }
        _ => Err(Error::ShapeMismatch {
            op: "volume",
            left: t.shape().to_vec(),
            right: vec![0, 0, 0],
        }),
    }
}
