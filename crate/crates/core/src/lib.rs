//! Spatiotemporal shape estimation for tendon-driven continuum robots.
//!
//! The crate covers the whole pipeline: a small reverse-mode tensor kernel
//! ([`tensor`]), the fused image + tendon network and its losses ([`net`]),
//! a constant-curvature robot simulator ([`sim`]) with a synthetic camera
//! ([`render`]), Bézier shape reconstruction ([`bezier`]), dataset generation
//! ([`data`]) and the training / evaluation harness ([`harness`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bezier;
pub mod data;
pub mod error;
pub mod harness;
pub mod net;
pub mod render;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
