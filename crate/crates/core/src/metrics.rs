//! Overlap and surface-distance metrics for binary segmentations.
//!
//! Surface distances are in voxel units. ASD and HD95 pool the distances
//! from both surfaces before taking the mean or the 95th percentile, so both
//! are symmetric in their arguments.

use serde::{Deserialize, Serialize};

use crate::dtrans::exact_edt;
use crate::error::{Error, Result};
use crate::tensor::{check_same, idx3, Tensor};

/// Metrics for one predicted mask against its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    /// `None` when either mask is empty
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

/// `(dice, precision, recall)`. Two empty masks score 1 on all three.
pub fn dice_precision_recall(pred: &Tensor<bool>, gt: &Tensor<bool>) -> Result<(f64, f64, f64)> {
    check_same("dice", pred.shape(), gt.shape())?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Ok((1.0, 1.0, 1.0));
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok((ratio(2 * tp, 2 * tp + fp + fneg), ratio(tp, tp + fp), ratio(tp, tp + fneg)))
}

/// Foreground voxels with at least one six-connected background neighbor.
/// Voxels outside the volume count as background.
pub fn surface(mask: &Tensor<bool>) -> Tensor<bool> {
    let dims = mask.spatial_dims();
    let [d, h, w] = dims;
    let block = d * h * w;
    let m = mask.data();
    let mut out = vec![false; m.len()];
    for (b, chunk) in out.chunks_mut(block.max(1)).enumerate() {
        let base = b * block;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = idx3(dims, z, y, x);
                    if !m[base + i] {
                        continue;
                    }
                    let at = |zz: usize, yy: usize, xx: usize| m[base + idx3(dims, zz, yy, xx)];
                    chunk[i] = z == 0
                        || y == 0
                        || x == 0
                        || z + 1 == d
                        || y + 1 == h
                        || x + 1 == w
                        || !at(z - 1, y, x)
                        || !at(z + 1, y, x)
                        || !at(z, y - 1, x)
                        || !at(z, y + 1, x)
                        || !at(z, y, x - 1)
                        || !at(z, y, x + 1);
                }
            }
        }
    }
    Tensor::new(mask.shape(), out).expect("same shape")
}

/// Percentile `q` in `[0, 100]` of unsorted values, interpolating linearly
/// between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Distances from every surface voxel of each mask to the other mask's
/// surface, both directions concatenated.
pub fn pooled_surface_distances(pred: &Tensor<bool>, gt: &Tensor<bool>) -> Result<Vec<f64>> {
    check_same("surface_distances", pred.shape(), gt.shape())?;
    if pred.count() == 0 || gt.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let (sp, sg) = (surface(pred), surface(gt));
    let to_gt = exact_edt(&sg)?;
    let to_pred = exact_edt(&sp)?;
    let mut out = Vec::with_capacity(sp.count() + sg.count());
    out.extend(sp.data().iter().zip(to_gt.data()).filter(|(s, _)| **s).map(|(_, d)| *d));
    out.extend(sg.data().iter().zip(to_pred.data()).filter(|(s, _)| **s).map(|(_, d)| *d));
    Ok(out)
}

/// `(asd, hd95)` over the pooled symmetric surface distances.
pub fn surface_distances(pred: &Tensor<bool>, gt: &Tensor<bool>) -> Result<(f64, f64)> {
    let d = pooled_surface_distances(pred, gt)?;
    let asd = d.iter().sum::<f64>() / d.len() as f64;
    let hd95 = percentile(&d, 95.0).expect("nonempty surfaces");
    Ok((asd, hd95))
}

/// All metrics at once; surface metrics are `None` for an empty mask.
pub fn evaluate(pred: &Tensor<bool>, gt: &Tensor<bool>) -> Result<SegMetrics> {
    let (dice, precision, recall) = dice_precision_recall(pred, gt)?;
    let (asd, hd95) = match surface_distances(pred, gt) {
        Ok((a, h)) => (Some(a), Some(h)),
        Err(Error::EmptyMask) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(SegMetrics {
        dice,
        precision,
        recall,
        asd,
        hd95,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && v[order[end + 1]] == v[order[start]] {
            end += 1;
        }
        let avg = (start + end) as f64 / 2.0;
        for &k in &order[start..=end] {
            r[k] = avg;
        }
        start = end + 1;
    }
    r
}

/// A constructed prediction/ground-truth pair with hand-computed metrics.
#[derive(Clone, Debug)]
pub struct MetricCase {
    pub name: &'static str,
    pub pred: Tensor<bool>,
    pub gt: Tensor<bool>,
    /// `None` on an overlap field: not hand-computed, skip it
    pub dice: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// `None` on a surface field: the metric must be undefined
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
    /// absolute tolerance on every field
    pub tol: f64,
}

fn points(dims: [usize; 3], on: &[[usize; 3]]) -> Tensor<bool> {
    let mut m = Tensor::full(&dims, false);
    for &[z, y, x] in on {
        m.data_mut()[idx3(dims, z, y, x)] = true;
    }
    m
}

/// One step of six-connected dilation.
pub fn dilate6(mask: &Tensor<bool>) -> Tensor<bool> {
    let dims = mask.spatial_dims();
    let [d, h, w] = dims;
    let m = mask.data();
    Tensor::from_fn(mask.shape(), |i| {
        let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
        let at = |zz: usize, yy: usize, xx: usize| m[idx3(dims, zz, yy, xx)];
        m[i] || (z > 0 && at(z - 1, y, x))
            || (z + 1 < d && at(z + 1, y, x))
            || (y > 0 && at(z, y - 1, x))
            || (y + 1 < h && at(z, y + 1, x))
            || (x > 0 && at(z, y, x - 1))
            || (x + 1 < w && at(z, y, x + 1))
    })
}

/// The reference cases. Point cases are exact; in the dilated ball every
/// surface voxel sits one voxel from the other surface.
pub fn reference_cases() -> Vec<MetricCase> {
    let line = [1, 1, 8];
    let cube = [5, 5, 5];
    let n = 24;
    let ball = Tensor::from_fn(&[n, n, n], |i| {
        let (z, y, x) = (i / (n * n), (i / n) % n, i % n);
        let c = 12.0;
        (z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2) <= 36.0
    });
    vec![
        MetricCase {
            name: "identical_point",
            pred: points(cube, &[[2, 2, 2]]),
            gt: points(cube, &[[2, 2, 2]]),
            dice: Some(1.0),
            precision: Some(1.0),
            recall: Some(1.0),
            asd: Some(0.0),
            hd95: Some(0.0),
            tol: 0.0,
        },
        MetricCase {
            name: "points_three_apart",
            pred: points(line, &[[0, 0, 1]]),
            gt: points(line, &[[0, 0, 4]]),
            dice: Some(0.0),
            precision: Some(0.0),
            recall: Some(0.0),
            asd: Some(3.0),
            hd95: Some(3.0),
            tol: 0.0,
        },
        MetricCase {
            name: "diagonal_points",
            pred: points(cube, &[[0, 0, 0]]),
            gt: points(cube, &[[1, 2, 2]]),
            dice: Some(0.0),
            precision: Some(0.0),
            recall: Some(0.0),
            asd: Some(3.0),
            hd95: Some(3.0),
            tol: 0.0,
        },
        // pooled distances [0, 4, 0]
        MetricCase {
            name: "extra_point",
            pred: points(line, &[[0, 0, 0], [0, 0, 4]]),
            gt: points(line, &[[0, 0, 0]]),
            dice: Some(2.0 / 3.0),
            precision: Some(0.5),
            recall: Some(1.0),
            asd: Some(4.0 / 3.0),
            hd95: Some(3.6),
            tol: 1e-12,
        },
        MetricCase {
            name: "empty_prediction",
            pred: points(cube, &[]),
            gt: points(cube, &[[1, 1, 1], [1, 1, 2]]),
            dice: Some(0.0),
            precision: Some(0.0),
            recall: Some(0.0),
            asd: None,
            hd95: None,
            tol: 0.0,
        },
        MetricCase {
            name: "dilated_ball",
            pred: dilate6(&ball),
            gt: ball,
            dice: None,
            precision: None,
            recall: Some(1.0),
            asd: Some(1.0),
            hd95: Some(1.0),
            tol: 0.05,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(shape: &[usize], on: &[usize]) -> Tensor<bool> {
        let mut m = Tensor::full(shape, false);
        for &i in on {
            m.data_mut()[i] = true;
        }
        m
    }

    #[test]
    fn identical_masks() {
        let m = mask(&[3, 3, 3], &[4, 13]);
        assert_eq!(dice_precision_recall(&m, &m).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(surface_distances(&m, &m).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn disjoint_masks() {
        let a = mask(&[1, 1, 4], &[0]);
        let b = mask(&[1, 1, 4], &[3]);
        assert_eq!(dice_precision_recall(&a, &b).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_masks() {
        let e = mask(&[2, 2, 2], &[]);
        assert_eq!(dice_precision_recall(&e, &e).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(surface_distances(&e, &mask(&[2, 2, 2], &[0])), Err(Error::EmptyMask));
        let m = evaluate(&e, &mask(&[2, 2, 2], &[1])).unwrap();
        assert_eq!((m.dice, m.asd, m.hd95), (0.0, None, None));
    }

    #[test]
    fn subset_half() {
        let gt = mask(&[1, 1, 4], &[0, 1]);
        let pred = mask(&[1, 1, 4], &[0]);
        let (d, p, r) = dice_precision_recall(&pred, &gt).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((p, r), (1.0, 0.5));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 50.0), Some(2.5));
        assert_eq!(percentile(&[0.0, 10.0], 95.0), Some(9.5));
        assert_eq!(percentile(&[], 95.0), None);
    }

    #[test]
    fn interior_voxel_is_not_surface() {
        let m = Tensor::full(&[3, 3, 3], true);
        let s = surface(&m);
        assert_eq!(s.count(), 26);
        assert!(!s.data()[13]);
    }

    #[test]
    fn spearman_of_monotone_map_is_one() {
        let a = [1.0, 5.0, 2.0, 2.0, 9.0];
        let b: Vec<f64> = a.iter().map(|v| v * v).collect();
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((spearman(&a, &c) + 1.0).abs() < 1e-12);
    }
}
