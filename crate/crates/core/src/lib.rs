//! Self-supervised acoustic shadow detection for convex-probe ultrasound.
//!
//! An encoder and two decoders split an image into a multiplicative shadow
//! map and a shadow-free content image whose product reconstructs the input.
//! Training needs no labels: random annular-sector shadows are injected into
//! each input and the shadow decoder learns to predict them.

pub mod cli;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod losses;
pub mod mask;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod shadow;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use mask::BinaryMask;
pub use shadow::{FanGeometry, SamplingConfig, SectorSpec, ShadowMask};
pub use tensor::{Graph, Tensor, Var};
