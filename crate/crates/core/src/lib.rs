//! Differentiable conversion between segmentation probability maps and
//! signed distance maps for 3D volumes, and a dual-task semi-supervised
//! trainer built on it.
//!
//! Modules, bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape, finite-difference checks
//! * [`dtrans`]: kernel-based approximate distance transform, exact EDT,
//!   signed maps and the two converters between probabilities and distances
//! * [`net`]: shared-encoder / dual-decoder volumetric network and SGD
//! * [`losses`]: supervision, consistency and pseudo-label losses
//! * [`metrics`]: Dice, precision, recall, ASD and HD95
//! * [`synth`]: deterministic synthetic volumes and patch sampling
//! * [`engine`]: the training loop, sliding-window inference, experiments
//! * [`volio`]: the BVOL container, run configuration and reports

pub mod dtrans;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod tensor;
pub mod volio;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
