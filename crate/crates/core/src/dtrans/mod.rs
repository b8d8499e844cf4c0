//! Distance transforms and the probability/signed-map converters.
//!
//! * [`Kernel`]: the `exp(-r/h)` kernel driving the soft-min propagation
//! * [`approx_dt`]: differentiable approximate distance transform
//! * [`exact_edt`]: exact Euclidean transform used as the reference
//! * [`t_s2r`] / [`t_r2s`]: probability map to signed map and back
//! * [`exact_signed`]: signed map of a binary mask from the exact transform
//! * [`roundtrip_mask`]: mask to signed map and back, exact or approximate

mod approx;
mod edt;
mod kernel;
mod roundtrip;
mod signed;

pub use approx::{approx_dt, approx_dt_value, auto_iterations, LOG_FLOOR};
pub use edt::exact_edt;
pub use kernel::Kernel;
pub use roundtrip::{roundtrip_mask, roundtrip_signed, RoundTripMode};
pub use signed::{
    exact_signed, r2s_value, resample, resample_back, s2r_value, scaled_dims, signed_parts, t_r2s, t_s2r,
    t_s2r_resampled, SignedDistanceParts,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Parameters of the distance transform and the two converters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    /// odd kernel extent per axis
    pub k_size: usize,
    /// kernel bandwidth in voxels
    pub h: f64,
    /// propagation passes; `None` = ceil(max dim / (k_size / 2))
    pub n_iters: Option<usize>,
    /// sigmoid steepness of the signed-map to probability conversion
    pub steepness: f64,
    /// downsampling factor applied before the transform during training
    pub down_rate: f64,
    /// values at or below this are not sources
    pub source_epsilon: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            k_size: 3,
            h: 0.35,
            n_iters: None,
            steepness: 1500.0,
            down_rate: 0.5,
            source_epsilon: 1e-6,
        }
    }
}

impl TransformConfig {
    pub fn kernel(&self) -> Result<Kernel> {
        Kernel::new(self.k_size, self.h)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel()?;
        if !(self.steepness > 0.0) {
            return Err(Error::InvalidConfig(format!("steepness must be > 0, got {}", self.steepness)));
        }
        if !(self.down_rate > 0.0 && self.down_rate <= 0.5) {
            return Err(Error::InvalidConfig(format!("down_rate must be in (0, 0.5], got {}", self.down_rate)));
        }
        if !(self.source_epsilon >= 0.0 && self.source_epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!("source_epsilon must be in [0, 1), got {}", self.source_epsilon)));
        }
        if self.n_iters == Some(0) {
            return Err(Error::InvalidConfig("n_iters must be positive".into()));
        }
        Ok(())
    }
}

/// A kernel and its configuration bundled for repeated conversions, with a
/// choice between full-resolution and downsampled [`t_s2r`].
#[derive(Clone, Debug)]
pub struct Converter {
    pub cfg: TransformConfig,
    kernel: Kernel,
    resampled: bool,
}

impl Converter {
    pub fn new(cfg: TransformConfig, resampled: bool) -> Result<Self> {
        let kernel = cfg.kernel()?;
        Ok(Self { cfg, kernel, resampled })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn resampled(&self) -> bool {
        self.resampled
    }

    /// Probability map `[B,1,D,H,W]` to signed map.
    pub fn s2r<T: Scalar>(&self, tape: &mut Tape<T>, prob: Var) -> Result<Var> {
        if self.resampled {
            t_s2r_resampled(tape, prob, &self.kernel, &self.cfg)
        } else {
            t_s2r(tape, prob, &self.kernel, &self.cfg)
        }
    }

    /// Signed map to foreground probability.
    pub fn r2s<T: Scalar>(&self, tape: &mut Tape<T>, reg: Var) -> Result<Var> {
        t_r2s(tape, reg, self.cfg.steepness)
    }
}
