//! Magnetic resonance fingerprinting reconstruction toolkit.
//!
//! The pipeline spans signature simulation through parameter-map recovery:
//!
//! - [`sequence`]: FISP acquisition schedules (per-frame TR/TE/FA).
//! - [`epg`]: extended-phase-graph simulation of complex signatures.
//! - [`dict`]: parameter lookup tables, dictionary synthesis, and matching.
//! - [`kspace`]: variable-density Gaussian subsampling of frame k-space with
//!   unitary centered Fourier operators.
//! - [`lowrank`]: singular-value-thresholding restoration of contrast stacks
//!   from subsampled measurements.
//! - [`net`]: a 1D residual nonlocal network regressing T1/T2 directly from
//!   signatures, trained from scratch with Adam under a max-norm constraint.
//! - [`eval`]: reconstruction metrics and synthetic phantoms.
//! - [`persist`]: bit-exact tensor, image, and JSON artifacts.

pub mod dict;
pub mod epg;
pub mod error;
pub mod eval;
pub mod kspace;
pub mod linalg;
pub mod lowrank;
pub mod net;
pub mod persist;
pub mod sequence;

pub use error::{Error, Result};
