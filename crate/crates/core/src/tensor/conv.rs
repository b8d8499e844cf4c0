//! Raw slice kernels behind the convolution and resampling tape ops.

use super::Scalar;

/// Output spatial dims of a cubic convolution with zero padding.
pub fn conv3d_output_dims(input: [usize; 3], k: usize, stride: usize, pad: usize) -> [usize; 3] {
    input.map(|n| (n + 2 * pad).saturating_sub(k) / stride + 1)
}

/// Output positions `o` with `o * s + off - p` inside `0..in_len`.
#[inline]
fn axis_range(out_len: usize, in_len: usize, off: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > off { (p - off).div_ceil(s) } else { 0 };
    let hi = if in_len + p > off {
        (in_len + p - off).div_ceil(s).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    fn in_size(&self) -> usize {
        self.in_dims.iter().product()
    }
    fn out_size(&self) -> usize {
        self.out_dims.iter().product()
    }
    fn k3(&self) -> usize {
        self.k * self.k * self.k
    }
}

/// Walks every (output row segment, input row) pair touched by one kernel
/// tap. `f(out_row_start, in_row_start, x_lo, x_hi, kw)`.
#[inline]
fn for_each_row(g: &ConvGeom, kd: usize, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let (s, p) = (g.stride, g.pad);
    let (zlo, zhi) = axis_range(od, d, kd, s, p);
    let (ylo, yhi) = axis_range(oh, h, kh, s, p);
    let (xlo, xhi) = axis_range(ow, w, kw, s, p);
    if xlo >= xhi {
        return;
    }
    for oz in zlo..zhi {
        let iz = oz * s + kd - p;
        for oy in ylo..yhi {
            let iy = oy * s + kh - p;
            f((oz * oh + oy) * ow, (iz * h + iy) * w, xlo, xhi);
        }
    }
}

/// Zero-padded grid for stride-1 "same" convolutions. Output voxel
/// `(z, y, x)` lives at padded index `(z, y, x)` and kernel tap `(a, b, c)`
/// reads the padded input at a constant flat offset from it.
struct PadGrid {
    pad: usize,
    dims: [usize; 3],
    pdims: [usize; 3],
    /// span of padded indices holding valid outputs
    len: usize,
}

impl PadGrid {
    fn new(dims: [usize; 3], pad: usize) -> Self {
        let pdims = dims.map(|n| n + 2 * pad);
        let len = ((dims[0] - 1) * pdims[1] + dims[1] - 1) * pdims[2] + dims[2];
        Self { pad, dims, pdims, len }
    }

    fn size(&self) -> usize {
        self.pdims.iter().product()
    }

    fn offsets(&self, k: usize) -> Vec<usize> {
        let mut v = Vec::with_capacity(k * k * k);
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    v.push((a * self.pdims[1] + b) * self.pdims[2] + c);
                }
            }
        }
        v
    }

    /// Copies a dense volume into the grid shifted by `at` on every axis.
    fn embed<T: Copy>(&self, src: &[T], at: usize, dst: &mut [T]) {
        let [d, h, w] = self.dims;
        let [_, ph, pw] = self.pdims;
        for z in 0..d {
            for y in 0..h {
                let o = ((z + at) * ph + y + at) * pw + at;
                dst[o..o + w].copy_from_slice(&src[(z * h + y) * w..][..w]);
            }
        }
    }

    fn extract<T: Copy>(&self, src: &[T], at: usize, dst: &mut [T]) {
        let [d, h, w] = self.dims;
        let [_, ph, pw] = self.pdims;
        for z in 0..d {
            for y in 0..h {
                let o = ((z + at) * ph + y + at) * pw + at;
                dst[(z * h + y) * w..][..w].copy_from_slice(&src[o..o + w]);
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with 32 interleaved partial sums.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const L: usize = 32;
    let mut acc = [T::zero(); L];
    let (ca, cb) = (a.chunks_exact(L), b.chunks_exact(L));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let x: &[T; L] = x.try_into().expect("chunk");
        let y: &[T; L] = y.try_into().expect("chunk");
        for l in 0..L {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Voxels per cache tile in the padded-grid kernels.
const TILE: usize = 4096;

fn tiles(len: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..len).step_by(TILE).map(move |a| (a, (a + TILE).min(len)))
}

fn is_same_stride1(g: &ConvGeom) -> bool {
    g.stride == 1 && 2 * g.pad + 1 == g.k
}

fn same_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let grid = PadGrid::new(g.in_dims, g.pad);
    let (isz, psz, k3, len) = (g.in_size(), grid.size(), g.k3(), grid.len);
    let offs = grid.offsets(g.k);
    let mut out = vec![T::zero(); g.batch * g.c_out * isz];
    let mut xp = vec![T::zero(); g.c_in * psz];
    let mut acc = vec![T::zero(); len];
    for b in 0..g.batch {
        for ci in 0..g.c_in {
            grid.embed(&x[(b * g.c_in + ci) * isz..][..isz], grid.pad, &mut xp[ci * psz..][..psz]);
        }
        for co in 0..g.c_out {
            acc.fill(bias.map_or(T::zero(), |bs| bs[co]));
            for (lo, hi) in tiles(len) {
                let a = &mut acc[lo..hi];
                for ci in 0..g.c_in {
                    let xs = &xp[ci * psz..][..psz];
                    let ws = &w[(co * g.c_in + ci) * k3..][..k3];
                    for (&wv, &off) in ws.iter().zip(&offs) {
                        axpy(a, &xs[lo + off..hi + off], wv);
                    }
                }
            }
            grid.extract(&acc, 0, &mut out[(b * g.c_out + co) * isz..][..isz]);
        }
    }
    out
}

fn same_backward_input<T: Scalar>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let grid = PadGrid::new(g.in_dims, g.pad);
    let (isz, psz, k3, len) = (g.in_size(), grid.size(), g.k3(), grid.len);
    let offs = grid.offsets(g.k);
    let mut gx = vec![T::zero(); g.batch * g.c_in * isz];
    let mut ge = vec![T::zero(); g.c_out * psz];
    let mut acc = vec![T::zero(); psz];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            grid.embed(&gout[(b * g.c_out + co) * isz..][..isz], 0, &mut ge[co * psz..][..psz]);
        }
        for ci in 0..g.c_in {
            acc.fill(T::zero());
            for (lo, hi) in tiles(len) {
                for co in 0..g.c_out {
                    let gs = &ge[co * psz + lo..co * psz + hi];
                    let ws = &w[(co * g.c_in + ci) * k3..][..k3];
                    for (&wv, &off) in ws.iter().zip(&offs) {
                        axpy(&mut acc[lo + off..hi + off], gs, wv);
                    }
                }
            }
            grid.extract(&acc, grid.pad, &mut gx[(b * g.c_in + ci) * isz..][..isz]);
        }
    }
    gx
}

fn same_backward_weight<T: Scalar>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let grid = PadGrid::new(g.in_dims, g.pad);
    let (isz, psz, k3, len) = (g.in_size(), grid.size(), g.k3(), grid.len);
    let offs = grid.offsets(g.k);
    let mut gw = vec![T::zero(); g.c_out * g.c_in * k3];
    let mut xp = vec![T::zero(); g.c_in * psz];
    let mut ge = vec![T::zero(); g.c_out * psz];
    for b in 0..g.batch {
        for ci in 0..g.c_in {
            grid.embed(&x[(b * g.c_in + ci) * isz..][..isz], grid.pad, &mut xp[ci * psz..][..psz]);
        }
        for co in 0..g.c_out {
            grid.embed(&gout[(b * g.c_out + co) * isz..][..isz], 0, &mut ge[co * psz..][..psz]);
        }
        for (lo, hi) in tiles(len) {
            for co in 0..g.c_out {
                let gs = &ge[co * psz + lo..co * psz + hi];
                for ci in 0..g.c_in {
                    let xs = &xp[ci * psz..][..psz];
                    let gws = &mut gw[(co * g.c_in + ci) * k3..][..k3];
                    for (gv, &off) in gws.iter_mut().zip(&offs) {
                        *gv += dot(gs, &xs[lo + off..hi + off]);
                    }
                }
            }
        }
    }
    gw
}

/// Input values read by one kernel tap, laid out on the output grid
/// (zero where the tap falls into padding).
fn gather_tap<T: Scalar>(xs: &[T], g: &ConvGeom, tap: [usize; 3], col: &mut [T]) {
    col.fill(T::zero());
    let [kd, kh, kw] = tap;
    let (s, p) = (g.stride, g.pad);
    for_each_row(g, kd, kh, kw, |orow, irow, xlo, xhi| {
        let dst = &mut col[orow + xlo..orow + xhi];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = xs[irow + (xlo + j) * s + kw - p];
        }
    });
}

/// Adjoint of [`gather_tap`]: adds `col` back onto the input positions.
fn scatter_tap<T: Scalar>(col: &[T], g: &ConvGeom, tap: [usize; 3], gxs: &mut [T]) {
    let [kd, kh, kw] = tap;
    let (s, p) = (g.stride, g.pad);
    for_each_row(g, kd, kh, kw, |orow, irow, xlo, xhi| {
        let src = &col[orow + xlo..orow + xhi];
        for (j, &v) in src.iter().enumerate() {
            gxs[irow + (xlo + j) * s + kw - p] += v;
        }
    });
}

fn taps(k: usize) -> impl Iterator<Item = (usize, [usize; 3])> {
    (0..k * k * k).map(move |t| (t, [t / (k * k), (t / k) % k, t % k]))
}

fn gather_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (isz, osz, k3) = (g.in_size(), g.out_size(), g.k3());
    let mut out = vec![T::zero(); g.batch * g.c_out * osz];
    let mut col = vec![T::zero(); osz];
    for b in 0..g.batch {
        if let Some(bias) = bias {
            for co in 0..g.c_out {
                out[(b * g.c_out + co) * osz..][..osz].fill(bias[co]);
            }
        }
        for ci in 0..g.c_in {
            let xs = &x[(b * g.c_in + ci) * isz..][..isz];
            for (t, tap) in taps(g.k) {
                gather_tap(xs, g, tap, &mut col);
                for co in 0..g.c_out {
                    let wv = w[(co * g.c_in + ci) * k3 + t];
                    axpy(&mut out[(b * g.c_out + co) * osz..][..osz], &col, wv);
                }
            }
        }
    }
    out
}

fn gather_backward_input<T: Scalar>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (isz, osz, k3) = (g.in_size(), g.out_size(), g.k3());
    let mut gx = vec![T::zero(); g.batch * g.c_in * isz];
    let mut col = vec![T::zero(); osz];
    for b in 0..g.batch {
        for ci in 0..g.c_in {
            for (t, tap) in taps(g.k) {
                col.fill(T::zero());
                for co in 0..g.c_out {
                    let wv = w[(co * g.c_in + ci) * k3 + t];
                    axpy(&mut col, &gout[(b * g.c_out + co) * osz..][..osz], wv);
                }
                scatter_tap(&col, g, tap, &mut gx[(b * g.c_in + ci) * isz..][..isz]);
            }
        }
    }
    gx
}

fn gather_backward_weight<T: Scalar>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let (isz, osz, k3) = (g.in_size(), g.out_size(), g.k3());
    let mut gw = vec![T::zero(); g.c_out * g.c_in * k3];
    let mut col = vec![T::zero(); osz];
    for b in 0..g.batch {
        for ci in 0..g.c_in {
            let xs = &x[(b * g.c_in + ci) * isz..][..isz];
            for (t, tap) in taps(g.k) {
                gather_tap(xs, g, tap, &mut col);
                for co in 0..g.c_out {
                    gw[(co * g.c_in + ci) * k3 + t] += dot(&gout[(b * g.c_out + co) * osz..][..osz], &col);
                }
            }
        }
    }
    gw
}

pub(crate) fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    if is_same_stride1(g) {
        same_forward(x, w, bias, g)
    } else {
        gather_forward(x, w, bias, g)
    }
}

#[cfg(test)]
fn rows_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (isz, osz, k3) = (g.in_size(), g.out_size(), g.k3());
    let mut out = vec![T::zero(); g.batch * g.c_out * osz];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o = &mut out[(b * g.c_out + co) * osz..][..osz];
            if let Some(bias) = bias {
                o.fill(bias[co]);
            }
            for ci in 0..g.c_in {
                let xs = &x[(b * g.c_in + ci) * isz..][..isz];
                let ws = &w[(co * g.c_in + ci) * k3..][..k3];
                for kd in 0..g.k {
                    for kh in 0..g.k {
                        for kw in 0..g.k {
                            let wv = ws[(kd * g.k + kh) * g.k + kw];
                            let (s, p) = (g.stride, g.pad);
                            for_each_row(g, kd, kh, kw, |orow, irow, xlo, xhi| {
                                let dst = &mut o[orow + xlo..orow + xhi];
                                if s == 1 {
                                    let src = &xs[irow + xlo + kw - p..irow + xhi + kw - p];
                                    for (d, &v) in dst.iter_mut().zip(src) {
                                        *d += wv * v;
                                    }
                                } else {
                                    for (j, d) in dst.iter_mut().enumerate() {
                                        *d += wv * xs[irow + (xlo + j) * s + kw - p];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv3d_backward_input<T: Scalar>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    if is_same_stride1(g) {
        same_backward_input(gout, w, g)
    } else {
        gather_backward_input(gout, w, g)
    }
}

#[cfg(test)]
fn rows_backward_input<T: Scalar>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (isz, osz, k3) = (g.in_size(), g.out_size(), g.k3());
    let mut gx = vec![T::zero(); g.batch * g.c_in * isz];
    for b in 0..g.batch {
        for ci in 0..g.c_in {
            let gxs = &mut gx[(b * g.c_in + ci) * isz..][..isz];
            for co in 0..g.c_out {
                let go = &gout[(b * g.c_out + co) * osz..][..osz];
                let ws = &w[(co * g.c_in + ci) * k3..][..k3];
                for kd in 0..g.k {
                    for kh in 0..g.k {
                        for kw in 0..g.k {
                            let wv = ws[(kd * g.k + kh) * g.k + kw];
                            let (s, p) = (g.stride, g.pad);
                            for_each_row(g, kd, kh, kw, |orow, irow, xlo, xhi| {
                                let src = &go[orow + xlo..orow + xhi];
                                if s == 1 {
                                    let dst = &mut gxs[irow + xlo + kw - p..irow + xhi + kw - p];
                                    for (d, &v) in dst.iter_mut().zip(src) {
                                        *d += wv * v;
                                    }
                                } else {
                                    for (j, &v) in src.iter().enumerate() {
                                        gxs[irow + (xlo + j) * s + kw - p] += wv * v;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn conv3d_backward_weight<T: Scalar>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    if is_same_stride1(g) {
        same_backward_weight(gout, x, g)
    } else {
        gather_backward_weight(gout, x, g)
    }
}

#[cfg(test)]
fn rows_backward_weight<T: Scalar>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let (isz, osz, k3) = (g.in_size(), g.out_size(), g.k3());
    let mut gw = vec![T::zero(); g.c_out * g.c_in * k3];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let go = &gout[(b * g.c_out + co) * osz..][..osz];
            for ci in 0..g.c_in {
                let xs = &x[(b * g.c_in + ci) * isz..][..isz];
                let gws = &mut gw[(co * g.c_in + ci) * k3..][..k3];
                for kd in 0..g.k {
                    for kh in 0..g.k {
                        for kw in 0..g.k {
                            let mut acc = T::zero();
                            let (s, p) = (g.stride, g.pad);
                            for_each_row(g, kd, kh, kw, |orow, irow, xlo, xhi| {
                                let src = &go[orow + xlo..orow + xhi];
                                if s == 1 {
                                    let xr = &xs[irow + xlo + kw - p..irow + xhi + kw - p];
                                    for (&a, &v) in src.iter().zip(xr) {
                                        acc += a * v;
                                    }
                                } else {
                                    for (j, &a) in src.iter().enumerate() {
                                        acc += a * xs[irow + (xlo + j) * s + kw - p];
                                    }
                                }
                            });
                            gws[(kd * g.k + kh) * g.k + kw] += acc;
                        }
                    }
                }
            }
        }
    }
    gw
}

pub(crate) fn channel_sums<T: Scalar>(gout: &[T], batch: usize, channels: usize, size: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            *o += gout[(b * channels + c) * size..][..size].iter().copied().sum::<T>();
        }
    }
    out
}

/// Geometry of a kernel-2 stride-2 transposed convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct UpGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_dims: [usize; 3],
}

impl UpGeom {
    pub fn out_dims(&self) -> [usize; 3] {
        self.in_dims.map(|n| 2 * n)
    }
}

/// Weight layout `[c_in, c_out, 2, 2, 2]`.
pub(crate) fn conv_t_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &UpGeom) -> Vec<T> {
    let [d, h, wd] = g.in_dims;
    let [_, oh, ow] = g.out_dims();
    let isz = d * h * wd;
    let osz = 8 * isz;
    let mut out = vec![T::zero(); g.batch * g.c_out * osz];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o = &mut out[(b * g.c_out + co) * osz..][..osz];
            if let Some(bias) = bias {
                o.fill(bias[co]);
            }
            for ci in 0..g.c_in {
                let xs = &x[(b * g.c_in + ci) * isz..][..isz];
                let ws = &w[(ci * g.c_out + co) * 8..][..8];
                for (t, &wv) in ws.iter().enumerate() {
                    let (a, bb, c) = (t >> 2, (t >> 1) & 1, t & 1);
                    for z in 0..d {
                        for y in 0..h {
                            let orow = ((2 * z + a) * oh + 2 * y + bb) * ow;
                            let irow = &xs[(z * h + y) * wd..][..wd];
                            for (xx, &v) in irow.iter().enumerate() {
                                o[orow + 2 * xx + c] += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_t_backward<T: Scalar>(gout: &[T], x: &[T], w: &[T], g: &UpGeom) -> (Vec<T>, Vec<T>) {
    let [d, h, wd] = g.in_dims;
    let [_, oh, ow] = g.out_dims();
    let isz = d * h * wd;
    let osz = 8 * isz;
    let mut gx = vec![T::zero(); g.batch * g.c_in * isz];
    let mut gw = vec![T::zero(); g.c_in * g.c_out * 8];
    for b in 0..g.batch {
        for ci in 0..g.c_in {
            let xs = &x[(b * g.c_in + ci) * isz..][..isz];
            let gxs = &mut gx[(b * g.c_in + ci) * isz..][..isz];
            for co in 0..g.c_out {
                let go = &gout[(b * g.c_out + co) * osz..][..osz];
                for t in 0..8 {
                    let (a, bb, c) = (t >> 2, (t >> 1) & 1, t & 1);
                    let wv = w[(ci * g.c_out + co) * 8 + t];
                    let mut acc = T::zero();
                    for z in 0..d {
                        for y in 0..h {
                            let orow = ((2 * z + a) * oh + 2 * y + bb) * ow;
                            let base = (z * h + y) * wd;
                            for xx in 0..wd {
                                let gv = go[orow + 2 * xx + c];
                                gxs[base + xx] += wv * gv;
                                acc += gv * xs[base + xx];
                            }
                        }
                    }
                    gw[(ci * g.c_out + co) * 8 + t] += acc;
                }
            }
        }
    }
    (gx, gw)
}

/// Clamped source index per (output position, kernel tap) along one axis.
fn replicate_table(n: usize, k: usize) -> Vec<usize> {
    let r = (k / 2) as isize;
    let mut t = Vec::with_capacity(n * k);
    for o in 0..n as isize {
        for j in 0..k as isize {
            t.push((o + j - r).clamp(0, n as isize - 1) as usize);
        }
    }
    t
}

/// Single-channel cross-correlation with a constant `k^3` kernel and
/// replicate border, applied independently to `blocks` volumes.
pub(crate) fn fixed_conv_forward<T: Scalar>(x: &[T], blocks: usize, dims: [usize; 3], kernel: &[T], k: usize) -> Vec<T> {
    let [d, h, w] = dims;
    let sz = d * h * w;
    let (tz, ty, tx) = (replicate_table(d, k), replicate_table(h, k), replicate_table(w, k));
    let mut out = vec![T::zero(); blocks * sz];
    for n in 0..blocks {
        let xs = &x[n * sz..][..sz];
        let o = &mut out[n * sz..][..sz];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let kv = kernel[(kd * k + kh) * k + kw];
                    for z in 0..d {
                        let iz = tz[z * k + kd];
                        for y in 0..h {
                            let iy = ty[y * k + kh];
                            let src = &xs[(iz * h + iy) * w..][..w];
                            let dst = &mut o[(z * h + y) * w..][..w];
                            for (xx, dv) in dst.iter_mut().enumerate() {
                                *dv += kv * src[tx[xx * k + kw]];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn fixed_conv_backward<T: Scalar>(gout: &[T], blocks: usize, dims: [usize; 3], kernel: &[T], k: usize) -> Vec<T> {
    let [d, h, w] = dims;
    let sz = d * h * w;
    let (tz, ty, tx) = (replicate_table(d, k), replicate_table(h, k), replicate_table(w, k));
    let mut gx = vec![T::zero(); blocks * sz];
    for n in 0..blocks {
        let go = &gout[n * sz..][..sz];
        let g = &mut gx[n * sz..][..sz];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let kv = kernel[(kd * k + kh) * k + kw];
                    for z in 0..d {
                        let iz = tz[z * k + kd];
                        for y in 0..h {
                            let iy = ty[y * k + kh];
                            let src = &go[(z * h + y) * w..][..w];
                            let row = (iz * h + iy) * w;
                            for (xx, &gv) in src.iter().enumerate() {
                                g[row + tx[xx * k + kw]] += kv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Linear interpolation weights along one axis (half-pixel centers, edge
/// clamped), the 1-D factor of trilinear resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleAxis {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub w1: Vec<f64>,
}

impl ResampleAxis {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut i0 = Vec::with_capacity(out_len);
        let mut i1 = Vec::with_capacity(out_len);
        let mut w1 = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            i0.push(lo);
            i1.push(hi);
            w1.push(if hi == lo { 0.0 } else { src - lo as f64 });
        }
        Self { i0, i1, w1 }
    }

    pub fn out_len(&self) -> usize {
        self.i0.len()
    }
}

/// Resample `blocks` volumes of `dims` along `axis` (0 = depth, 2 = width).
pub(crate) fn resample_axis<T: Scalar>(x: &[T], blocks: usize, dims: [usize; 3], axis: usize, map: &ResampleAxis) -> (Vec<T>, [usize; 3]) {
    let mut od = dims;
    od[axis] = map.out_len();
    let outer: usize = blocks * dims[..axis].iter().product::<usize>();
    let inner: usize = dims[axis + 1..].iter().product();
    let (n_in, n_out) = (dims[axis], od[axis]);
    let mut out = vec![T::zero(); outer * n_out * inner];
    for o in 0..outer {
        let src = &x[o * n_in * inner..][..n_in * inner];
        let dst = &mut out[o * n_out * inner..][..n_out * inner];
        for j in 0..n_out {
            let w1 = T::of(map.w1[j]);
            let w0 = T::one() - w1;
            let a = &src[map.i0[j] * inner..][..inner];
            let b = &src[map.i1[j] * inner..][..inner];
            for ((d, &va), &vb) in dst[j * inner..][..inner].iter_mut().zip(a).zip(b) {
                *d = w0 * va + w1 * vb;
            }
        }
    }
    (out, od)
}

/// Adjoint of [`resample_axis`]; `dims` are the forward input dims.
pub(crate) fn resample_axis_adjoint<T: Scalar>(g: &[T], blocks: usize, dims: [usize; 3], axis: usize, map: &ResampleAxis) -> Vec<T> {
    let outer: usize = blocks * dims[..axis].iter().product::<usize>();
    let inner: usize = dims[axis + 1..].iter().product();
    let (n_in, n_out) = (dims[axis], map.out_len());
    let mut gx = vec![T::zero(); outer * n_in * inner];
    for o in 0..outer {
        let src = &g[o * n_out * inner..][..n_out * inner];
        let dst = &mut gx[o * n_in * inner..][..n_in * inner];
        for j in 0..n_out {
            let w1 = T::of(map.w1[j]);
            let w0 = T::one() - w1;
            let gs = &src[j * inner..][..inner];
            let (a, b) = (map.i0[j] * inner, map.i1[j] * inner);
            for (t, &gv) in gs.iter().enumerate() {
                dst[a + t] += w0 * gv;
                dst[b + t] += w1 * gv;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims() {
        assert_eq!(conv3d_output_dims([8, 8, 8], 3, 1, 1), [8, 8, 8]);
        assert_eq!(conv3d_output_dims([8, 8, 8], 3, 2, 1), [4, 4, 4]);
        assert_eq!(conv3d_output_dims([8, 6, 4], 1, 1, 0), [8, 6, 4]);
    }

    #[test]
    fn axis_range_respects_bounds() {
        // stride 2, pad 1, k = 3 on length 8 -> out 4
        for off in 0..3 {
            let (lo, hi) = axis_range(4, 8, off, 2, 1);
            for o in 0..4 {
                let i = (o * 2 + off) as isize - 1;
                assert_eq!((lo..hi).contains(&o), (0..8).contains(&i), "off {off} o {o}");
            }
        }
    }

    #[test]
    fn padded_grid_paths_match_row_paths() {
        let mut seed = 12345u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for (k, pad) in [(3, 1), (1, 0), (5, 2)] {
            let g = ConvGeom {
                batch: 2,
                c_in: 3,
                c_out: 2,
                k,
                stride: 1,
                pad,
                in_dims: [4, 5, 6],
                out_dims: [4, 5, 6],
            };
            let x: Vec<f64> = (0..2 * 3 * 120).map(|_| next()).collect();
            let w: Vec<f64> = (0..2 * 3 * k * k * k).map(|_| next()).collect();
            let bias = [0.25, -0.5];
            let go: Vec<f64> = (0..2 * 2 * 120).map(|_| next()).collect();
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
            assert!(close(&same_forward(&x, &w, Some(&bias), &g), &rows_forward(&x, &w, Some(&bias), &g)));
            assert!(close(&same_backward_input(&go, &w, &g), &rows_backward_input(&go, &w, &g)));
            assert!(close(&same_backward_weight(&go, &x, &g), &rows_backward_weight(&go, &x, &g)));
        }
    }

    #[test]
    fn gather_paths_match_row_paths() {
        let mut seed = 99u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for (k, stride, pad) in [(3, 2, 1), (3, 1, 0), (2, 2, 0), (3, 3, 2)] {
            let in_dims = [5, 6, 7];
            let g = ConvGeom {
                batch: 2,
                c_in: 2,
                c_out: 3,
                k,
                stride,
                pad,
                in_dims,
                out_dims: conv3d_output_dims(in_dims, k, stride, pad),
            };
            let x: Vec<f64> = (0..2 * 2 * 210).map(|_| next()).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k * k).map(|_| next()).collect();
            let go: Vec<f64> = (0..2 * 3 * g.out_size()).map(|_| next()).collect();
            let bias = [0.1, 0.2, 0.3];
            let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
            assert!(close(&gather_forward(&x, &w, Some(&bias), &g), &rows_forward(&x, &w, Some(&bias), &g)));
            assert!(close(&gather_backward_input(&go, &w, &g), &rows_backward_input(&go, &w, &g)));
            assert!(close(&gather_backward_weight(&go, &x, &g), &rows_backward_weight(&go, &x, &g)));
        }
    }

    #[test]
    fn halving_averages_pairs() {
        let m = ResampleAxis::new(4, 2);
        assert_eq!(m.i0, vec![0, 2]);
        assert_eq!(m.i1, vec![1, 3]);
        assert_eq!(m.w1, vec![0.5, 0.5]);
    }

    #[test]
    fn resample_adjoint_identity() {
        // <A x, y> == <x, A^T y>
        let dims = [3, 4, 5];
        let map = ResampleAxis::new(4, 7);
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let (ax, od) = resample_axis(&x, 1, dims, 1, &map);
        let y: Vec<f64> = (0..od.iter().product::<usize>()).map(|i| (i as f64 * 0.11).cos()).collect();
        let aty = resample_axis_adjoint(&y, 1, dims, 1, &map);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
