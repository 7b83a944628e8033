//! Localized makeup transfer by gradient descent in pixel space.
//!
//! The engine synthesizes an after-makeup face from a before-makeup photo
//! and a reference makeup photo by minimizing a sum of localized loss terms
//! over deep convolutional features:
//!
//! - per-region cosmetic terms — an eye-shadow content match and masked
//!   Gram-style terms for lips and foundation — each behind the
//!   [`losses::CosmeticTerm`] trait and selected at runtime by region name,
//! - a structure-preservation term that anchors the result to the input
//!   face, and
//! - a total-variation smoothness term.
//!
//! Supporting pieces: face-parsing utilities (weighted cross-entropy,
//! symmetric-prior averaging, labelmap/mask conversions), thin-plate-spline
//! warping of eye-shadow masks between faces, momentum gradient descent with
//! lightness sweeps, and embedding-based reference recommendation.

pub mod convnet;
pub mod error;
pub mod fixtures;
pub mod imageio;
pub mod losses;
pub mod manifest;
pub mod optim;
pub mod parsing;
pub mod recommend;
pub mod selfcheck;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
