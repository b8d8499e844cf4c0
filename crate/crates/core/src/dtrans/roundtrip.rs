//! Mask to signed map and back, through the exact or the approximate
//! transform, at full or reduced resolution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::signed::{exact_signed, r2s_value, s2r_value, scaled_dims};
use super::TransformConfig;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundTripMode {
    OfflineOriginal,
    OnlineOriginal,
    OfflineResample,
    OnlineResample,
}

impl RoundTripMode {
    pub const ALL: [RoundTripMode; 4] = [
        RoundTripMode::OfflineOriginal,
        RoundTripMode::OnlineOriginal,
        RoundTripMode::OfflineResample,
        RoundTripMode::OnlineResample,
    ];

    /// Whether gradients can flow through the conversion.
    pub fn differentiable(self) -> bool {
        matches!(self, RoundTripMode::OnlineOriginal | RoundTripMode::OnlineResample)
    }

    pub fn resampled(self) -> bool {
        matches!(self, RoundTripMode::OfflineResample | RoundTripMode::OnlineResample)
    }

    pub fn name(self) -> &'static str {
        match self {
            RoundTripMode::OfflineOriginal => "offline-original",
            RoundTripMode::OnlineOriginal => "online-original",
            RoundTripMode::OfflineResample => "offline-resample",
            RoundTripMode::OnlineResample => "online-resample",
        }
    }
}

impl fmt::Display for RoundTripMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoundTripMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown round-trip mode {s:?}")))
    }
}

fn resize(t: &Tensor<f64>, dims: [usize; 3]) -> Result<Tensor<f64>> {
    let s = t.spatial_dims();
    let mut tape = Tape::new();
    let x = tape.constant(t.clone().reshape(&[1, 1, s[0], s[1], s[2]])?);
    let y = tape.resample(x, dims)?;
    tape.value(y).clone().reshape(&dims)
}

/// The signed map of a `[D, H, W]` mask under `mode`.
pub fn roundtrip_signed(mask: &Tensor<bool>, mode: RoundTripMode, cfg: &TransformConfig) -> Result<Tensor<f64>> {
    let dims = mask.spatial_dims();
    if mask.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "roundtrip",
            left: mask.shape().to_vec(),
            right: vec![0, 0, 0],
        });
    }
    let prob = mask.to_float::<f64>();
    match mode {
        RoundTripMode::OfflineOriginal => exact_signed(mask),
        RoundTripMode::OnlineOriginal => s2r_value(&prob, cfg, false),
        RoundTripMode::OnlineResample => s2r_value(&prob, cfg, true),
        RoundTripMode::OfflineResample => {
            let small = resize(&prob, scaled_dims(dims, cfg.down_rate))?.threshold(0.5);
            resize(&exact_signed(&small)?, dims)
        }
    }
}

/// Mask recovered from its signed map under `mode`.
pub fn roundtrip_mask(mask: &Tensor<bool>, mode: RoundTripMode, cfg: &TransformConfig) -> Result<Tensor<bool>> {
    let r = roundtrip_signed(mask, mode, cfg)?;
    Ok(r2s_value(&r, cfg.steepness).threshold(0.5))
}
