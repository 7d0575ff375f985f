//! Probing and intervention toolkit for two-view pointmap transformers.
//!
//! Geometry and synthetic scenes ([`geom`], [`scene`]), the model adapter contract with a
//! toy and a planted reference model ([`harness`]), per-patch probes ([`probe`]),
//! evaluation math ([`metrics`]), attention analytics ([`attn`]) and persistence ([`store`]).

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attn;
pub mod autodiff;
pub mod error;
pub mod geom;
pub mod harness;
pub mod intervene;
pub mod metrics;
pub mod nn;
pub mod probe;
pub mod scene;
pub mod store;

pub use error::{Error, Result};
