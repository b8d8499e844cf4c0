//! Exact Euclidean distance transform by separable lower envelopes of
//! parabolas, one axis at a time.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Squared distance transform of one sampled line, in place.
///
/// `f` holds 0 at sources and `f64::INFINITY` elsewhere on the first pass,
/// and partial squared distances on later passes.
fn envelope_1d(f: &mut [f64], v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    // locations with finite values only
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if k < 0 {
            k = 0;
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        let qf = q as f64;
        loop {
            let p = v[k as usize];
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= z[k as usize] {
                k -= 1;
                if k < 0 {
                    break;
                }
            } else {
                break;
            }
        }
        k += 1;
        let ku = k as usize;
        v[ku] = q;
        if ku == 0 {
            z[0] = f64::NEG_INFINITY;
        } else {
            let p = v[ku - 1];
            let pf = p as f64;
            z[ku] = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
        }
        z[ku + 1] = f64::INFINITY;
    }
    if k < 0 {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0;
    for q in 0..n {
        let qf = q as f64;
        while z[j + 1] < qf {
            j += 1;
        }
        let p = v[j];
        let d = qf - p as f64;
        out[q] = d * d + f[p];
    }
    f.copy_from_slice(out);
}

/// Squared EDT of a `[d, h, w]` block given as a seed mask.
fn squared_edt_block(mask: &[bool], dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let n = d.max(h).max(w);
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut zb = vec![0.0; n + 1];
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        // iterate every line along `axis`
        for start in 0..d * h * w {
            let coord = (start / stride) % len;
            if coord != 0 {
                continue;
            }
            for (t, l) in line[..len].iter_mut().enumerate() {
                *l = g[start + t * stride];
            }
            envelope_1d(&mut line[..len], &mut v, &mut zb, &mut out[..len]);
            for (t, &l) in line[..len].iter().enumerate() {
                g[start + t * stride] = l;
            }
        }
    }
    g
}

/// Splits a shape into (independent blocks, last-three spatial dims).
pub(crate) fn split_blocks(shape: &[usize]) -> (usize, [usize; 3]) {
    let r = shape.len();
    let get = |k: usize| if r >= k { shape[r - k] } else { 1 };
    let dims = [get(3), get(2), get(1)];
    let sz: usize = dims.iter().product();
    let total: usize = shape.iter().product();
    (if sz == 0 { 0 } else { total / sz }, dims)
}

/// Exact Euclidean distance (unit spacing) from each voxel to the nearest
/// `true` voxel. Leading axes beyond the last three are independent volumes;
/// each must contain at least one `true` voxel.
pub fn exact_edt(mask: &Tensor<bool>) -> Result<Tensor<f64>> {
    let (blocks, dims) = split_blocks(mask.shape());
    let sz: usize = dims.iter().product();
    let mut data = Vec::with_capacity(mask.numel());
    for b in 0..blocks {
        let block = &mask.data()[b * sz..(b + 1) * sz];
        if !block.iter().any(|&m| m) {
            return Err(Error::NoSource);
        }
        data.extend(squared_edt_block(block, dims).into_iter().map(f64::sqrt));
    }
    Tensor::new(mask.shape(), data)
}
