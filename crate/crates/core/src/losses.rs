//! Supervision, consistency and pseudo-label losses over the four head
//! outputs, and their weighted total.

pub mod checks;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dtrans::Converter;
use crate::error::{Error, Result};
use crate::net::DualOutput;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Soft-Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside
/// cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// weight of the supervision and consistency terms
    pub lambda: f64,
    /// final weight of the pseudo-label term
    pub beta_max: f64,
    /// ramp-up length in iterations; `None` = 40% of the run
    pub ramp_len: Option<usize>,
    pub dice_weight: f64,
    pub ce_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            beta_max: 0.1,
            ramp_len: None,
            dice_weight: 0.5,
            ce_weight: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.beta_max >= 0.0) {
            return Err(Error::InvalidConfig("lambda and beta_max must be >= 0".into()));
        }
        if !(self.dice_weight >= 0.0 && self.ce_weight >= 0.0) || (self.dice_weight + self.ce_weight - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "dice_weight + ce_weight must be 1 with both >= 0, got {} + {}",
                self.dice_weight, self.ce_weight
            )));
        }
        Ok(())
    }

    pub fn ramp_for(&self, max_iterations: usize) -> usize {
        self.ramp_len.unwrap_or((max_iterations as f64 * 0.4).round() as usize)
    }

    /// `beta_max * exp(-5 (1 - min(t / ramp, 1))^2)`.
    pub fn beta(&self, t: usize, ramp: usize) -> f64 {
        let phase = if ramp == 0 { 1.0 } else { (t as f64 / ramp as f64).min(1.0) };
        self.beta_max * (-5.0 * (1.0 - phase).powi(2)).exp()
    }
}

/// Per-voxel binary cross-entropy map `-(t ln p + (1 - t) ln(1 - p))`.
fn bce_map<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let p = tape.clamp(pred, T::of(PROB_CLAMP), T::of(1.0 - PROB_CLAMP))?;
    let lp = tape.log(p)?;
    let q = tape.rsub_scalar(T::one(), p)?;
    let lq = tape.log(q)?;
    let tq = tape.rsub_scalar(T::one(), target)?;
    let a = tape.mul(target, lp)?;
    let b = tape.mul(tq, lq)?;
    let s = tape.add(a, b)?;
    tape.neg(s)
}

pub fn bce<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let m = bce_map(tape, pred, target)?;
    tape.mean(m)
}

/// `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)` over the whole tensor.
pub fn soft_dice_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let pt = tape.mul(pred, target)?;
    let inter = tape.sum(pt)?;
    let sp = tape.sum(pred)?;
    let st = tape.sum(target)?;
    let num = tape.mul_scalar(inter, T::of(2.0))?;
    let num = tape.add_scalar(num, T::of(DICE_SMOOTH))?;
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, T::of(DICE_SMOOTH))?;
    let ratio = tape.div(num, den)?;
    tape.rsub_scalar(T::one(), ratio)
}

/// Weighted soft-Dice plus binary cross-entropy.
pub fn seg_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, w: &LossWeights) -> Result<Var> {
    crate::tensor::check_same("seg_loss", tape.shape(pred), tape.shape(target))?;
    let d = soft_dice_loss(tape, pred, target)?;
    let c = bce(tape, pred, target)?;
    let d = tape.mul_scalar(d, T::of(w.dice_weight))?;
    let c = tape.mul_scalar(c, T::of(w.ce_weight))?;
    tape.add(d, c)
}

/// A composite loss with its named sub-terms.
#[derive(Clone, Debug)]
pub struct Terms {
    pub total: Var,
    pub parts: Vec<(String, Var)>,
}

fn sum_terms<T: Scalar>(tape: &mut Tape<T>, parts: Vec<(String, Var)>) -> Result<Terms> {
    let mut total = match parts.first() {
        Some(&(_, v)) => v,
        None => tape.scalar(T::zero()),
    };
    for &(_, v) in parts.iter().skip(1) {
        total = tape.add(total, v)?;
    }
    Ok(Terms { total, parts })
}

/// Which head outputs a loss may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    /// segmentation and regression
    Both,
    /// segmentation heads only
    SegOnly,
}

/// Σ over branches of `seg_loss(Ŷ, Y) + mse(R̂, R)`.
pub fn sup_intra<T: Scalar>(
    tape: &mut Tape<T>,
    out: &DualOutput,
    y: Var,
    r: Var,
    w: &LossWeights,
    heads: Heads,
) -> Result<Terms> {
    let mut parts = Vec::new();
    for (tag, yp, rp) in [("phi", out.y_phi, out.r_phi), ("psi", out.y_psi, out.r_psi)] {
        parts.push((format!("sup_it.seg_{tag}"), seg_loss(tape, yp, y, w)?));
        if heads == Heads::Both {
            parts.push((format!("sup_it.mse_{tag}"), tape.mse(rp, r)?));
        }
    }
    sum_terms(tape, parts)
}

/// Σ over branches of `mse(T_s2r(Ŷ), R) + seg_loss(T_r2s(R̂), Y)`.
pub fn sup_cross<T: Scalar>(
    tape: &mut Tape<T>,
    out: &DualOutput,
    y: Var,
    r: Var,
    conv: &Converter,
    w: &LossWeights,
) -> Result<Terms> {
    let mut parts = Vec::new();
    for (tag, yp, rp) in [("phi", out.y_phi, out.r_phi), ("psi", out.y_psi, out.r_psi)] {
        let s = conv.s2r(tape, yp)?;
        parts.push((format!("sup_ct.s2r_{tag}"), tape.mse(s, r)?));
        let p = conv.r2s(tape, rp)?;
        parts.push((format!("sup_ct.r2s_{tag}"), seg_loss(tape, p, y, w)?));
    }
    sum_terms(tape, parts)
}

/// `mse(Ŷ_Φ, Ŷ_Ψ) + mse(R̂_Φ, R̂_Ψ)`.
pub fn con_intra<T: Scalar>(tape: &mut Tape<T>, out: &DualOutput, heads: Heads) -> Result<Terms> {
    let mut parts = vec![("con_it.seg".to_string(), tape.mse(out.y_phi, out.y_psi)?)];
    if heads == Heads::Both {
        parts.push(("con_it.reg".to_string(), tape.mse(out.r_phi, out.r_psi)?));
    }
    sum_terms(tape, parts)
}

/// Σ over branches of `mse(T_s2r(Ŷ), R̂) + mse(T_r2s(R̂), Ŷ)`, with
/// gradients into both sides of each pair.
pub fn con_cross<T: Scalar>(tape: &mut Tape<T>, out: &DualOutput, conv: &Converter) -> Result<Terms> {
    let mut parts = Vec::new();
    for (tag, yp, rp) in [("phi", out.y_phi, out.r_phi), ("psi", out.y_psi, out.r_psi)] {
        let s = conv.s2r(tape, yp)?;
        parts.push((format!("con_ct.s2r_{tag}"), tape.mse(s, rp)?));
        let p = conv.r2s(tape, rp)?;
        parts.push((format!("con_ct.r2s_{tag}"), tape.mse(p, yp)?));
    }
    sum_terms(tape, parts)
}

/// Detached average of the two segmentation maps, optionally hardened at
/// 0.5.
pub fn pseudo_label<T: Scalar>(tape: &mut Tape<T>, out: &DualOutput, harden: bool) -> Result<Var> {
    let a = tape.value(out.y_phi);
    let b = tape.value(out.y_psi);
    let half = T::of(0.5);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| {
            let m = (p + q) * half;
            if !harden {
                m
            } else if m >= half {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(tape.constant(Tensor::new(a.shape(), data)?))
}

/// Foreground decision of each head: probability `>= 0.5`, signed map `< 0`.
#[inline]
pub fn prob_vote<T: Scalar>(p: T) -> bool {
    p >= T::of(0.5)
}

#[inline]
pub fn reg_vote<T: Scalar>(r: T) -> bool {
    r < T::zero()
}

/// Voxels where every head casts the same foreground vote. With
/// [`Heads::SegOnly`] only the two segmentation heads vote.
pub fn confidence_mask<T: Scalar>(tape: &Tape<T>, out: &DualOutput, heads: Heads) -> Tensor<bool> {
    let (yp, ys) = (tape.value(out.y_phi).data(), tape.value(out.y_psi).data());
    let (rp, rs) = (tape.value(out.r_phi).data(), tape.value(out.r_psi).data());
    let shape = tape.shape(out.y_phi);
    Tensor::from_fn(shape, |i| {
        let v = prob_vote(yp[i]);
        let agree = prob_vote(ys[i]) == v;
        match heads {
            Heads::SegOnly => agree,
            Heads::Both => agree && reg_vote(rp[i]) == v && reg_vote(rs[i]) == v,
        }
    })
}

/// `sum((CE(Ŷ_Φ, Ȳ) + CE(Ŷ_Ψ, Ȳ)) ⊙ M) / max(sum(M), 1)`.
pub fn pse_loss<T: Scalar>(tape: &mut Tape<T>, out: &DualOutput, ybar: Var, mask: &Tensor<bool>) -> Result<Var> {
    let a = bce_map(tape, out.y_phi, ybar)?;
    let b = bce_map(tape, out.y_psi, ybar)?;
    let s = tape.add(a, b)?;
    let zero = tape.constant(Tensor::zeros(tape.shape(s)));
    let masked = tape.select(mask, s, zero)?;
    let total = tape.sum(masked)?;
    let n = mask.count().max(1) as f64;
    tape.mul_scalar(total, T::of(1.0 / n))
}

/// The five top-level parts of one step.
#[derive(Clone, Copy, Debug)]
pub struct Parts {
    pub sup_it: Var,
    pub sup_ct: Var,
    pub con_it: Var,
    pub con_ct: Var,
    pub pse: Var,
}

/// `lambda (sup_it + sup_ct + con_it + con_ct) + beta pse`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, parts: &Parts, lambda: f64, beta: f64) -> Result<Var> {
    let a = tape.add(parts.sup_it, parts.sup_ct)?;
    let b = tape.add(parts.con_it, parts.con_ct)?;
    let s = tape.add(a, b)?;
    let s = tape.mul_scalar(s, T::of(lambda))?;
    let p = tape.mul_scalar(parts.pse, T::of(beta))?;
    tape.add(s, p)
}

/// Scalar values of every loss term of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub sup_it: f64,
    pub sup_ct: f64,
    pub con_it: f64,
    pub con_ct: f64,
    pub pse: f64,
    pub lambda: f64,
    pub beta: f64,
    pub total: f64,
    pub lr: f64,
    /// fraction of voxels in the unanimous-consent mask
    pub mask_fraction: f64,
    /// named sub-terms of each part
    pub terms: BTreeMap<String, f64>,
}

impl LossReport {
    /// The weighted sum recomputed from the stored parts.
    pub fn recomputed_total(&self) -> f64 {
        self.lambda * (self.sup_it + self.sup_ct + self.con_it + self.con_ct) + self.beta * self.pse
    }

    pub const CSV_HEADER: &'static str = "iteration,total,sup_it,sup_ct,con_it,con_ct,pse,lambda,beta,lr,mask_fraction";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.total,
            self.sup_it,
            self.sup_ct,
            self.con_it,
            self.con_ct,
            self.pse,
            self.lambda,
            self.beta,
            self.lr,
            self.mask_fraction
        )
    }
}
