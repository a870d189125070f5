//! Hierarchical rearrangement MLP (Hire-MLP) backbone on the CPU.
//!
//! * [`tensor`], [`ops`], [`graph`], [`autodiff`], [`gradcheck`]: dense
//!   arrays, kernels, execution backends and reverse-mode gradients.
//! * [`rearrange`]: region partition and the inner-/cross-region token
//!   rearrangements with their exact inverses.
//! * [`hire`]: the three-branch hire module.
//! * [`network`]: blocks, patch embeddings, the four-stage pyramid and the
//!   variant configs.
//! * [`accounting`]: closed-form and traversal parameter/FLOP counts.
//! * [`invariants`]: property suites shared by the tests and the CLI.

pub mod accounting;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hire;
pub mod init;
pub mod invariants;
pub mod network;
pub mod ops;
pub mod params;
pub mod rearrange;
pub mod serialize;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, FeatureMap};
