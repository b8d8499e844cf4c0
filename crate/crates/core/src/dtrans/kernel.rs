use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Radially decaying convolution kernel `exp(-r / h)` over a cube of odd
/// extent, centered on the middle voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    extent: usize,
    bandwidth: f64,
    weights: Tensor<f64>,
}

impl Kernel {
    pub fn new(extent: usize, bandwidth: f64) -> Result<Self> {
        if extent < 3 || extent.is_multiple_of(2) {
            return Err(Error::EvenKernel(extent));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::NonPositiveBandwidth(bandwidth));
        }
        let r = (extent / 2) as isize;
        let weights = Tensor::from_fn(&[extent, extent, extent], |i| {
            let z = (i / (extent * extent)) as isize - r;
            let y = ((i / extent) % extent) as isize - r;
            let x = (i % extent) as isize - r;
            let dist = ((x * x + y * y + z * z) as f64).sqrt();
            (-dist / bandwidth).exp()
        });
        Ok(Self {
            extent,
            bandwidth,
            weights,
        })
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Half extent, rounded down: the distance band each pass adds.
    pub fn radius(&self) -> usize {
        self.extent / 2
    }

    pub fn weights(&self) -> &Tensor<f64> {
        &self.weights
    }

    /// Weight at a centered integer offset.
    pub fn at(&self, z: isize, y: isize, x: isize) -> f64 {
        let r = self.radius() as isize;
        let e = self.extent;
        let i = ((z + r) as usize * e + (y + r) as usize) * e + (x + r) as usize;
        self.weights.data()[i]
    }

    pub fn weights_as<T: Scalar>(&self) -> Tensor<T> {
        self.weights.cast()
    }
}
