//! Browser bindings for three operations on a synthetic volume: the signed
//! map of its mask (exact or through the soft converter), a mask round trip,
//! and the approximate-vs-exact distance agreement.
//!
//! The `*_impl` functions are plain Rust so they run under `cargo test`;
//! the exported wrappers only convert errors.

use dualdist::dtrans::{approx_dt_value, exact_edt, exact_signed, roundtrip_mask, s2r_value, RoundTripMode, TransformConfig};
use dualdist::metrics::{dice_precision_recall, spearman};
use dualdist::synth::{gen_volume, Appearance, ShapeKind, SynthVolume};
use dualdist::tensor::Tensor;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_SIZE: usize = 48;

fn kind_of(name: &str) -> Result<ShapeKind, String> {
    match name {
        "ball" => Ok(ShapeKind::Ball),
        "ellipsoid" => Ok(ShapeKind::Ellipsoid),
        "two_lobe" => Ok(ShapeKind::TwoLobe),
        other => Err(format!("unknown shape {other:?}")),
    }
}

fn volume(seed: u64, kind: &str, size: usize) -> Result<SynthVolume, String> {
    if size > MAX_SIZE {
        return Err(format!("size {size} above {MAX_SIZE}"));
    }
    gen_volume(seed, kind_of(kind)?, size, &Appearance::default()).map_err(|e| e.to_string())
}

fn transform_cfg(h: f64) -> Result<TransformConfig, String> {
    let cfg = TransformConfig {
        h,
        ..TransformConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Middle axial slice of a `[D, H, W]` tensor, row-major.
fn mid_slice<T: Copy>(t: &Tensor<T>, conv: impl Fn(T) -> f32) -> Vec<f32> {
    let [d, h, w] = t.spatial_dims();
    let z = d / 2;
    t.data()[z * h * w..(z + 1) * h * w].iter().map(|&v| conv(v)).collect()
}

pub fn mask_slice_impl(seed: u64, kind: &str, size: usize) -> Result<Vec<f32>, String> {
    let v = volume(seed, kind, size)?;
    Ok(mid_slice(&v.mask, |m| if m { 1.0 } else { 0.0 }))
}

pub fn image_slice_impl(seed: u64, kind: &str, size: usize) -> Result<Vec<f32>, String> {
    let v = volume(seed, kind, size)?;
    Ok(mid_slice(&v.image, |x| x))
}

pub fn signed_slice_impl(seed: u64, kind: &str, size: usize, approx: bool, h: f64) -> Result<Vec<f32>, String> {
    let v = volume(seed, kind, size)?;
    let r = if approx {
        s2r_value(&v.mask.to_float::<f64>(), &transform_cfg(h)?, false).map_err(|e| e.to_string())?
    } else {
        exact_signed(&v.mask).map_err(|e| e.to_string())?
    };
    Ok(mid_slice(&r, |x| x as f32))
}

#[derive(Debug, Serialize)]
pub struct RoundTripView {
    pub mode: String,
    pub dice: f64,
    pub slice: Vec<f32>,
}

pub fn roundtrip_impl(seed: u64, kind: &str, size: usize, mode: &str, h: f64) -> Result<RoundTripView, String> {
    let v = volume(seed, kind, size)?;
    let mode: RoundTripMode = mode.parse().map_err(|e: dualdist::Error| e.to_string())?;
    let back = roundtrip_mask(&v.mask, mode, &transform_cfg(h)?).map_err(|e| e.to_string())?;
    let (dice, _, _) = dice_precision_recall(&back, &v.mask).map_err(|e| e.to_string())?;
    Ok(RoundTripView {
        mode: mode.to_string(),
        dice,
        slice: mid_slice(&back, |m| if m { 1.0 } else { 0.0 }),
    })
}

#[derive(Debug, Serialize)]
pub struct Agreement {
    pub spearman: f64,
    pub mean_abs_error: f64,
    pub exact_slice: Vec<f32>,
    pub approx_slice: Vec<f32>,
}

/// Background distance to the object: exact vs approximate.
pub fn agreement_impl(seed: u64, kind: &str, size: usize, h: f64) -> Result<Agreement, String> {
    let v = volume(seed, kind, size)?;
    let exact = exact_edt(&v.mask).map_err(|e| e.to_string())?;
    let approx = approx_dt_value(&v.mask.to_float::<f64>(), &transform_cfg(h)?).map_err(|e| e.to_string())?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for ((&m, &e), &x) in v.mask.data().iter().zip(exact.data()).zip(approx.data()) {
        if !m {
            a.push(e);
            b.push(x);
        }
    }
    let mae = a.iter().zip(&b).map(|(e, x)| (e - x).abs()).sum::<f64>() / a.len().max(1) as f64;
    Ok(Agreement {
        spearman: spearman(&a, &b),
        mean_abs_error: mae,
        exact_slice: mid_slice(&exact, |x| x as f32),
        approx_slice: mid_slice(&approx, |x| x as f32),
    })
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    js(r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())))
}

#[wasm_bindgen]
pub fn mask_slice(seed: u32, kind: &str, size: usize) -> Result<Vec<f32>, JsError> {
    js(mask_slice_impl(seed as u64, kind, size))
}

#[wasm_bindgen]
pub fn image_slice(seed: u32, kind: &str, size: usize) -> Result<Vec<f32>, JsError> {
    js(image_slice_impl(seed as u64, kind, size))
}

#[wasm_bindgen]
pub fn signed_slice(seed: u32, kind: &str, size: usize, approx: bool, h: f64) -> Result<Vec<f32>, JsError> {
    js(signed_slice_impl(seed as u64, kind, size, approx, h))
}

/// JSON `{mode, dice, slice}`.
#[wasm_bindgen]
pub fn roundtrip(seed: u32, kind: &str, size: usize, mode: &str, h: f64) -> Result<String, JsError> {
    json(roundtrip_impl(seed as u64, kind, size, mode, h))
}

/// JSON `{spearman, mean_abs_error, exact_slice, approx_slice}`.
#[wasm_bindgen]
pub fn agreement(seed: u32, kind: &str, size: usize, h: f64) -> Result<String, JsError> {
    json(agreement_impl(seed as u64, kind, size, h))
}
