use super::conv::{self, ConvGeom, ResampleAxis, UpGeom};
use super::{check_same, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Pick(Var, usize),
    Select(Vec<bool>, Var, Var),
    FixedConv(Var, Vec<T>, usize),
    Conv(Var, Var, Option<Var>, ConvGeom),
    ConvT(Var, Var, Option<Var>, UpGeom),
    Resample(Var, usize, [[usize; 3]; 3], [ResampleAxis; 3]),
    InstanceNorm(Var, Vec<T>),
    SliceBatch(Var, usize),
    Concat(Vec<Var>),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one [`Tape::backward`] call, keyed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Euclidean norm of the gradient of `v` (0 when absent).
    pub fn norm(&self, v: Var) -> f64 {
        self.get(v)
            .map(|g| g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }
}

/// Records ops for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. Each op also logs its discrete choices (select masks,
/// extremal indices, clamp and relu activity) so a finite-difference check can
/// tell when a perturbation crossed a kink.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    decisions: Vec<u64>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn fingerprint(bits: impl Iterator<Item = bool>) -> u64 {
    // FNV-1a over the bit pattern
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bits {
        h ^= b as u64 + 1;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            decisions: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the tape can record a fresh episode.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.decisions.clear();
        self.consumed = false;
    }

    pub fn decisions(&self) -> &[u64] {
        &self.decisions
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFiniteResult(name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Same values, no tape edge, never requires grad.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor::new(va.shape(), data)?)
        } else if vb.numel() == 1 {
            let y = vb.item();
            Ok(va.map(|&x| f(x, y)))
        } else if va.numel() == 1 {
            let x = va.item();
            Ok(vb.map(|&y| f(x, y)))
        } else {
            Err(Error::ShapeMismatch {
                op: name,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", v, Op::Div(a, b), &[a, b])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|&x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|&x| x * c);
        self.push("mul_scalar", v, Op::MulScalar(a, c), &[a])
    }

    /// `c - a`
    pub fn rsub_scalar(&mut self, c: T, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|&x| -x);
        self.push("neg", v, Op::Neg(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|&x| x.exp());
        self.push("exp", v, Op::Exp(a), &[a])
    }

    /// Natural log. Nonpositive inputs yield `NonFiniteResult`; clamp first.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::NonFiniteResult("log"));
        }
        let v = va.map(|&x| x.ln());
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|&x| sigmoid(x));
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|&x| x.tanh());
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let fp = fingerprint(va.data().iter().map(|&x| x > T::zero()));
        let v = va.map(|&x| if x > T::zero() { x } else { T::zero() });
        self.decisions.push(fp);
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|&x| x * x);
        self.push("square", v, Op::Square(a), &[a])
    }

    /// Clamp to `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let va = self.value(a);
        let fp = fingerprint(va.data().iter().map(|&x| x >= lo && x <= hi));
        let v = va.map(|&x| x.max(lo).min(hi));
        self.decisions.push(fp);
        self.push("clamp", v, Op::Clamp(a, lo, hi), &[a])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.numel() == 0 {
            return Err(Error::EmptyTensor("sum"));
        }
        let v = Tensor::scalar(va.sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.numel() == 0 {
            return Err(Error::EmptyTensor("mean"));
        }
        let v = Tensor::scalar(va.sum() / T::of(va.numel() as f64));
        self.push("mean", v, Op::Mean(a), &[a])
    }

    /// Minimum; the gradient goes to the first minimal element in row-major order.
    pub fn min(&mut self, a: Var) -> Result<Var> {
        self.extremum("min", a, |cand, best| cand < best)
    }

    /// Maximum; the gradient goes to the first maximal element in row-major order.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        self.extremum("max", a, |cand, best| cand > best)
    }

    fn extremum(&mut self, name: &'static str, a: Var, better: impl Fn(T, T) -> bool) -> Result<Var> {
        let data = self.value(a).data();
        if data.is_empty() {
            return Err(Error::EmptyTensor(name));
        }
        let mut best = 0;
        for (i, &x) in data.iter().enumerate().skip(1) {
            if better(x, data[best]) {
                best = i;
            }
        }
        let v = Tensor::scalar(data[best]);
        self.decisions.push(best as u64);
        self.push(name, v, Op::Pick(a, best), &[a])
    }

    // ---- structural -----------------------------------------------------

    /// `mask ? a : b`. The mask is a constant.
    pub fn select(&mut self, mask: &Tensor<bool>, a: Var, b: Var) -> Result<Var> {
        check_same("select", mask.shape(), self.shape(a))?;
        check_same("select", mask.shape(), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = mask
            .data()
            .iter()
            .zip(va.data().iter().zip(vb.data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let v = Tensor::new(mask.shape(), data)?;
        self.decisions.push(fingerprint(mask.data().iter().copied()));
        self.push("select", v, Op::Select(mask.data().to_vec(), a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Sample `i` along the leading axis, keeping the axis (size 1).
    pub fn slice_batch(&mut self, a: Var, i: usize) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape();
        if shape.is_empty() || i >= shape[0] {
            return Err(Error::ShapeMismatch {
                op: "slice_batch",
                left: shape.to_vec(),
                right: vec![i],
            });
        }
        let block = va.numel() / shape[0];
        let mut s = shape.to_vec();
        s[0] = 1;
        let v = Tensor::new(&s, va.data()[i * block..(i + 1) * block].to_vec())?;
        self.push("slice_batch", v, Op::SliceBatch(a, i), &[a])
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyTensor("concat"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: s.to_vec(),
                    right: tail,
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let v = Tensor::new(&shape, data)?;
        self.push("concat", v, Op::Concat(parts.to_vec()), parts)
    }

    // ---- convolution and resampling ----------------------------------

    /// Correlation of each `[B, 1, D, H, W]` volume with a constant `k^3`
    /// kernel (replicate border, same-size output).
    pub fn conv3d_fixed(&mut self, x: Var, kernel: &Tensor<T>) -> Result<Var> {
        let k = kernel.shape().first().copied().unwrap_or(0);
        if kernel.shape() != [k, k, k] {
            return Err(Error::ShapeMismatch {
                op: "conv3d_fixed",
                left: kernel.shape().to_vec(),
                right: vec![k, k, k],
            });
        }
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 5 || s[1] != 1 {
            return Err(Error::ShapeMismatch {
                op: "conv3d_fixed",
                left: s.to_vec(),
                right: vec![0, 1, 0, 0, 0],
            });
        }
        let dims = vx.spatial_dims();
        let data = conv::fixed_conv_forward(vx.data(), s[0], dims, kernel.data(), k);
        let v = Tensor::new(s, data)?;
        self.push("conv3d_fixed", v, Op::FixedConv(x, kernel.data().to_vec(), k), &[x])
    }

    /// Learnable cubic convolution with zero padding. `x: [B, Ci, D, H, W]`,
    /// `w: [Co, Ci, k, k, k]`, `b: [Co]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                left: xs,
                right: ws,
            });
        }
        if let Some(b) = b {
            check_same("conv3d bias", self.shape(b), &[ws[0]])?;
        }
        let in_dims = [xs[2], xs[3], xs[4]];
        let g = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            k: ws[2],
            stride,
            pad,
            in_dims,
            out_dims: conv::conv3d_output_dims(in_dims, ws[2], stride, pad),
        };
        let data = conv::conv3d_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &g);
        let [od, oh, ow] = g.out_dims;
        let v = Tensor::new(&[xs[0], ws[0], od, oh, ow], data)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("conv3d", v, Op::Conv(x, w, b, g), &parents)
    }

    /// Kernel-2 stride-2 transposed convolution. `w: [Ci, Co, 2, 2, 2]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 || ws[0] != xs[1] || ws[2..] != [2, 2, 2] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose3d",
                left: xs,
                right: ws,
            });
        }
        if let Some(b) = b {
            check_same("conv_transpose3d bias", self.shape(b), &[ws[1]])?;
        }
        let g = UpGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[1],
            in_dims: [xs[2], xs[3], xs[4]],
        };
        let data = conv::conv_t_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &g);
        let [od, oh, ow] = g.out_dims();
        let v = Tensor::new(&[xs[0], ws[1], od, oh, ow], data)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("conv_transpose3d", v, Op::ConvT(x, w, b, g), &parents)
    }

    /// Trilinear resampling of the last three axes to `target`
    /// (half-pixel centers). Equal shapes return an exact copy.
    pub fn resample(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        if s.len() < 3 || target.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "resample",
                left: s,
                right: target.to_vec(),
            });
        }
        let dims = vx.spatial_dims();
        let blocks = vx.numel() / dims.iter().product::<usize>();
        let maps = [0, 1, 2].map(|a| ResampleAxis::new(dims[a], target[a]));
        let mut chain = [dims; 3];
        let mut cur = vx.data().to_vec();
        let mut cd = dims;
        if dims != target {
            for (a, map) in maps.iter().enumerate() {
                chain[a] = cd;
                let (next, nd) = conv::resample_axis(&cur, blocks, cd, a, map);
                cur = next;
                cd = nd;
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape[r - 3..].copy_from_slice(&target);
        let v = Tensor::new(&shape, cur)?;
        self.push("resample", v, Op::Resample(x, blocks, chain, maps), &[x])
    }

    /// Per-(sample, channel) normalization to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 5 {
            return Err(Error::ShapeMismatch {
                op: "instance_norm",
                left: s.to_vec(),
                right: vec![0; 5],
            });
        }
        let n = s[2] * s[3] * s[4];
        let nt = T::of(n as f64);
        let mut out = vx.data().to_vec();
        let mut inv = Vec::with_capacity(s[0] * s[1]);
        for block in out.chunks_mut(n) {
            let mean = block.iter().copied().sum::<T>() / nt;
            let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let is = T::one() / (var + eps).sqrt();
            for v in block.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv.push(is);
        }
        let v = Tensor::new(s, out)?;
        self.push("instance_norm", v, Op::InstanceNorm(x, inv), &[x])
    }

    // ---- composites ---------------------------------------------------

    /// Mean squared error.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mse", self.shape(a), self.shape(b))?;
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from the scalar `loss`. Returns gradients for every leaf
    /// that requires them (zeros for leaves the loss does not depend on).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::DoubleBackwardUnsupported);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(g) => Tensor::new(node.value.shape(), g).expect("grad shape"),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = val(*b);
                    self.acc(grads, *a, g.iter().enumerate().map(|(j, &gv)| gv * bcast(vb, j)).collect());
                }
                if self.needs(*b) {
                    let va = val(*a);
                    self.acc(grads, *b, g.iter().enumerate().map(|(j, &gv)| gv * bcast(va, j)).collect());
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.needs(*a) {
                    self.acc(grads, *a, g.iter().enumerate().map(|(j, &gv)| gv / bcast(vb, j)).collect());
                }
                if self.needs(*b) {
                    let c = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| {
                            let d = bcast(vb, j);
                            -gv * bcast(va, j) / (d * d)
                        })
                        .collect();
                    self.acc(grads, *b, c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::MulScalar(a, c) => self.acc(grads, *a, g.iter().map(|&x| x * *c).collect()),
            Op::Neg(a) => self.acc(grads, *a, g.iter().map(|&x| -x).collect()),
            Op::Exp(a) => self.acc(grads, *a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect()),
            Op::Log(a) => {
                let x = val(*a);
                self.acc(grads, *a, g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect())
            }
            Op::Sigmoid(a) => self.acc(grads, *a, g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect()),
            Op::Tanh(a) => self.acc(grads, *a, g.iter().zip(y).map(|(&gv, &t)| gv * (T::one() - t * t)).collect()),
            Op::Relu(a) => {
                let x = val(*a);
                self.acc(grads, *a, g.iter().zip(x).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect())
            }
            Op::Square(a) => {
                let x = val(*a);
                let two = T::of(2.0);
                self.acc(grads, *a, g.iter().zip(x).map(|(&gv, &xv)| two * xv * gv).collect())
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                let c = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                    .collect();
                self.acc(grads, *a, c)
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                self.acc(grads, *a, vec![g[0]; n])
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                self.acc(grads, *a, vec![g[0] / T::of(n as f64); n])
            }
            Op::Pick(a, idx) => {
                let mut c = vec![T::zero(); val(*a).len()];
                c[*idx] = g[0];
                self.acc(grads, *a, c)
            }
            Op::Select(mask, a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.iter().zip(mask).map(|(&gv, &m)| if m { gv } else { T::zero() }).collect());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.iter().zip(mask).map(|(&gv, &m)| if m { T::zero() } else { gv }).collect());
                }
            }
            Op::FixedConv(x, kernel, k) => {
                let s = self.nodes[x.0].value.shape();
                let dims = self.nodes[x.0].value.spatial_dims();
                self.acc(grads, *x, conv::fixed_conv_backward(g, s[0], dims, kernel, *k));
            }
            Op::Conv(x, w, b, geom) => {
                if self.needs(*x) {
                    self.acc(grads, *x, conv::conv3d_backward_input(g, val(*w), geom));
                }
                if self.needs(*w) {
                    self.acc(grads, *w, conv::conv3d_backward_weight(g, val(*x), geom));
                }
                if let Some(b) = b {
                    let osz = geom.out_dims.iter().product();
                    self.acc(grads, *b, conv::channel_sums(g, geom.batch, geom.c_out, osz));
                }
            }
            Op::ConvT(x, w, b, geom) => {
                if self.needs(*x) || self.needs(*w) {
                    let (gx, gw) = conv::conv_t_backward(g, val(*x), val(*w), geom);
                    self.acc(grads, *x, gx);
                    self.acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    let osz = geom.out_dims().iter().product();
                    self.acc(grads, *b, conv::channel_sums(g, geom.batch, geom.c_out, osz));
                }
            }
            Op::Resample(x, blocks, chain, maps) => {
                let src = &self.nodes[x.0].value;
                if src.spatial_dims() == node.value.spatial_dims() {
                    self.acc(grads, *x, g.to_vec());
                } else {
                    let mut cur = g.to_vec();
                    for a in (0..3).rev() {
                        cur = conv::resample_axis_adjoint(&cur, *blocks, chain[a], a, &maps[a]);
                    }
                    self.acc(grads, *x, cur);
                }
            }
            Op::InstanceNorm(x, inv) => {
                let s = node.value.shape();
                let n = s[2] * s[3] * s[4];
                let nt = T::of(n as f64);
                let mut c = vec![T::zero(); g.len()];
                for (bi, is) in inv.iter().enumerate() {
                    let gs = &g[bi * n..][..n];
                    let ys = &y[bi * n..][..n];
                    let mg = gs.iter().copied().sum::<T>() / nt;
                    let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / nt;
                    for ((o, &gv), &yv) in c[bi * n..][..n].iter_mut().zip(gs).zip(ys) {
                        *o = *is * (gv - mg - yv * mgy);
                    }
                }
                self.acc(grads, *x, c)
            }
            Op::SliceBatch(x, idx) => {
                let n = val(*x).len();
                let block = g.len();
                let mut c = vec![T::zero(); n];
                c[idx * block..(idx + 1) * block].copy_from_slice(g);
                self.acc(grads, *x, c)
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    self.acc(grads, *p, g[off..off + n].to_vec());
                    off += n;
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds `contrib` into the gradient of `v`, summing it down when `v`
    /// was broadcast as a scalar.
    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let contrib = if n == 1 && contrib.len() != 1 {
            vec![contrib.iter().copied().sum()]
        } else {
            contrib
        };
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }
}

#[inline]
fn bcast<T: Copy>(data: &[T], j: usize) -> T {
    if data.len() == 1 {
        data[0]
    } else {
        data[j]
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
