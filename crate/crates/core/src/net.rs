//! Shared-encoder, dual-decoder volumetric network and its SGD optimizer.
//!
//! The encoder is a stack of 3³ conv blocks (instance norm + ReLU), each
//! level after the first halving the resolution with stride 2. Decoder Φ
//! upsamples with a learned 2³ transposed convolution; decoder Ψ with
//! trilinear resizing followed by a 1³ convolution. Both add the encoder
//! skip of the same level and refine with a 3³ conv block. Every decoder
//! ends in a segmentation head (sigmoid) and a regression head (tanh).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// channels per resolution level, finest first
    pub widths: Vec<usize>,
    /// dropout probability on the bottleneck features in training mode
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            dropout: 0.1,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "widths need at least two positive levels, got {:?}",
                self.widths
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Decoder {
    up: Vec<Layer>,
    refine: Vec<Layer>,
    seg: Layer,
    reg: Layer,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<Layer>,
    phi: Decoder,
    psi: Decoder,
}

/// The four head outputs of one forward pass, each `[B, 1, D, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct DualOutput {
    pub y_phi: Var,
    pub y_psi: Var,
    pub r_phi: Var,
    pub r_psi: Var,
}

impl DualOutput {
    /// Φ and Ψ exchanged.
    pub fn swapped(self) -> Self {
        Self {
            y_phi: self.y_psi,
            y_psi: self.y_phi,
            r_phi: self.r_psi,
            r_psi: self.r_phi,
        }
    }
}

/// Parameter handles of a [`DualNet`] registered on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct DualNet {
    config: NetConfig,
    params: Vec<Param>,
    layout: Layout,
}

impl PartialEq for DualNet {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

fn he_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

struct Builder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    zero: bool,
}

impl Builder {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Layer {
        let shape = [c_out, c_in, k, k, k];
        let w = if self.zero {
            Tensor::zeros(&shape)
        } else {
            he_init(&shape, c_in * k * k * k, &mut self.rng)
        };
        self.push(name, w, c_out)
    }

    fn conv_t(&mut self, name: &str, c_in: usize, c_out: usize) -> Layer {
        let w = he_init(&[c_in, c_out, 2, 2, 2], c_in, &mut self.rng);
        self.push(name, w, c_out)
    }

    fn push(&mut self, name: &str, w: Tensor<f32>, c_out: usize) -> Layer {
        self.params.push(Param {
            name: format!("{name}.weight"),
            value: w,
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            value: Tensor::zeros(&[c_out]),
        });
        Layer {
            w: self.params.len() - 2,
            b: self.params.len() - 1,
        }
    }
}

fn build(config: &NetConfig) -> (Layout, Vec<Param>) {
    let w = &config.widths;
    let mut b = Builder {
        params: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        zero: false,
    };
    let mut enc = vec![b.conv("enc0", w[0], 1, 3)];
    for l in 1..w.len() {
        enc.push(b.conv(&format!("enc{l}"), w[l], w[l - 1], 3));
    }
    let decoder = |b: &mut Builder, tag: &str, transposed: bool| {
        let mut up = Vec::new();
        let mut refine = Vec::new();
        for l in (1..w.len()).rev() {
            up.push(if transposed {
                b.conv_t(&format!("{tag}.up{l}"), w[l], w[l - 1])
            } else {
                b.conv(&format!("{tag}.up{l}"), w[l - 1], w[l], 1)
            });
            refine.push(b.conv(&format!("{tag}.refine{l}"), w[l - 1], w[l - 1], 3));
        }
        b.zero = true;
        let seg = b.conv(&format!("{tag}.seg_head"), 1, w[0], 1);
        let reg = b.conv(&format!("{tag}.reg_head"), 1, w[0], 1);
        b.zero = false;
        Decoder { up, refine, seg, reg }
    };
    let phi = decoder(&mut b, "phi", true);
    let psi = decoder(&mut b, "psi", false);
    let layout = Layout { enc, phi, psi };
    (layout, b.params)
}

impl DualNet {
    /// Seeded He initialization; heads start at zero.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build(&config);
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(config: NetConfig, params: Vec<Param>) -> Result<Self> {
        let fresh = Self::new(config.clone())?;
        if fresh.params.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (a, b) in fresh.params.iter().zip(&params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(Self { params, ..fresh })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.value.cast())).collect(),
        }
    }

    /// One shared encoder pass feeding both decoders. `dropout_rng` enables
    /// training-mode dropout on the bottleneck.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<DualOutput> {
        let s = tape.shape(x).to_vec();
        let div = self.config.divisor();
        if s.len() != 5 || s[1] != 1 || s[2..].iter().any(|&d| d == 0 || d % div != 0) {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: s,
                right: vec![0, 1, div, div, div],
            });
        }
        let layout = &self.layout;
        let p = |l: Layer| (bound.vars[l.w], bound.vars[l.b]);
        let block = |tape: &mut Tape<T>, h: Var, l: Layer, stride: usize| -> Result<Var> {
            let (w, b) = p(l);
            let c = tape.conv3d(h, w, Some(b), stride, 1)?;
            let n = tape.instance_norm(c, T::of(NORM_EPS))?;
            tape.relu(n)
        };

        let mut skips = Vec::with_capacity(layout.enc.len());
        let mut h = block(tape, x, layout.enc[0], 1)?;
        for l in &layout.enc[1..] {
            skips.push(h);
            h = block(tape, h, *l, 2)?;
        }
        if let Some(rng) = dropout_rng {
            if self.config.dropout > 0.0 {
                let keep = 1.0 - self.config.dropout;
                let scale = T::of(1.0 / keep);
                let mask = Tensor::from_fn(tape.shape(h), |_| if rng.gen_bool(keep) { scale } else { T::zero() });
                let m = tape.constant(mask);
                h = tape.mul(h, m)?;
            }
        }
        let bottleneck = h;

        let heads = |tape: &mut Tape<T>, dec: &Decoder, transposed: bool| -> Result<(Var, Var)> {
            let mut h = bottleneck;
            for (i, skip) in skips.iter().rev().enumerate() {
                let (w, b) = p(dec.up[i]);
                let up = if transposed {
                    tape.conv_transpose3d(h, w, Some(b))?
                } else {
                    let dims = tape.value(*skip).spatial_dims();
                    let r = tape.resample(h, dims)?;
                    tape.conv3d(r, w, Some(b), 1, 0)?
                };
                let merged = tape.add(up, *skip)?;
                h = block(tape, merged, dec.refine[i], 1)?;
            }
            let (sw, sb) = p(dec.seg);
            let seg = tape.conv3d(h, sw, Some(sb), 1, 0)?;
            let (rw, rb) = p(dec.reg);
            let reg = tape.conv3d(h, rw, Some(rb), 1, 0)?;
            Ok((tape.sigmoid(seg)?, tape.tanh(reg)?))
        };
        let (y_phi, r_phi) = heads(tape, &layout.phi, true)?;
        let (y_psi, r_psi) = heads(tape, &layout.psi, false)?;
        Ok(DualOutput {
            y_phi,
            y_psi,
            r_phi,
            r_psi,
        })
    }
}

/// SGD with momentum, weight decay and polynomial learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    /// rescale the joint gradient to at most this L2 norm
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            clip_norm: Some(1.0),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let clip_ok = self.clip_norm.is_none_or(|c| c > 0.0);
        if !(self.lr >= 0.0 && (0.0..1.0).contains(&self.momentum) && self.weight_decay >= 0.0 && self.power >= 0.0 && clip_ok)
        {
            return Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SgdState {
    pub config: SgdConfig,
    pub max_iterations: usize,
    pub iteration: usize,
    buffers: Vec<Option<Vec<f32>>>,
}

impl SgdState {
    pub fn new(config: SgdConfig, max_iterations: usize) -> Self {
        Self {
            config,
            max_iterations,
            iteration: 0,
            buffers: Vec::new(),
        }
    }

    /// `lr0 * (1 - t / T)^power`, zero from `T` on.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.max_iterations == 0 || t >= self.max_iterations {
            return 0.0;
        }
        self.config.lr * (1.0 - t as f64 / self.max_iterations as f64).powf(self.config.power)
    }

    pub fn lr(&self) -> f64 {
        self.lr_at(self.iteration)
    }
}

/// Gradients of each parameter, in parameter order.
pub fn collect_grads(net: &DualNet, bound: &Bound, grads: &mut Gradients<f32>) -> Vec<Option<Tensor<f32>>> {
    debug_assert_eq!(net.params().len(), bound.vars.len());
    bound.vars.iter().map(|&v| grads.take(v)).collect()
}

/// L2 norm of all gradients together.
pub fn grad_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt()
}

/// One update `buf <- momentum * buf + g + wd * p; p <- p - lr * buf`, with
/// `g` rescaled first when its joint norm exceeds `clip_norm`.
pub fn sgd_step(net: &mut DualNet, grads: &[Option<Tensor<f32>>], state: &mut SgdState) -> Result<()> {
    if grads.len() != net.params.len() {
        return Err(Error::MissingGrad(format!("{} gradients for {} parameters", grads.len(), net.params.len())));
    }
    for (p, g) in net.params.iter().zip(grads) {
        match g {
            Some(g) if g.shape() == p.value.shape() => {}
            _ => return Err(Error::MissingGrad(p.name.clone())),
        }
    }
    let scale = match state.config.clip_norm {
        Some(c) => {
            let n = grad_norm(grads);
            if n > c {
                (c / n) as f32
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let lr = state.lr() as f32;
    let mom = state.config.momentum as f32;
    let wd = state.config.weight_decay as f32;
    state.buffers.resize(net.params.len(), None);
    for ((p, g), buf) in net.params.iter_mut().zip(grads).zip(state.buffers.iter_mut()) {
        let g = g.as_ref().expect("checked above").data();
        let buf = buf.get_or_insert_with(|| vec![0.0; g.len()]);
        for ((w, &gi), bi) in p.value.data_mut().iter_mut().zip(g).zip(buf.iter_mut()) {
            *bi = mom * *bi + scale * gi + wd * *w;
            *w -= lr * *bi;
        }
    }
    state.iteration += 1;
    Ok(())
}
