//! Multi-view metric-learning re-identification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, a differentiation tape, layer primitives,
//!   the optimizer and checkpoint I/O.
//! * [`net`]: convolutional and residual blocks and the two-branch embedding
//!   network.
//! * [`metric`]: pair similarities, the histogram and triplet losses and hard
//!   triplet mining.
//! * [`synth`]: the procedural two-view dataset, augmentation and PPM I/O.
//! * [`eval`]: galleries, exact KNN matching and Top-k protocols.
//! * [`baselines`]: EigenFaces, LBPH and HOG descriptors.

pub mod error;
#[macro_use]
pub mod eval;
pub mod baselines;
pub mod metric;
pub mod net;
pub mod seed;
pub mod synth;
pub mod tensor;
mod view;

pub use error::{Error, Result};
pub use view::View;
