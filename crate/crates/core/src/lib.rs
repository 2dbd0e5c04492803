//! Bidirectional thing/stuff graph reasoning engine.
//!
//! The crate builds image-specific graphs over detected regions (things) and
//! semantic class centers (stuff), connects them through a learnable
//! block-structured attention adjacency, re-projects the reasoned node
//! features back onto proposals and pixels, fuses the two branches into a
//! panoptic map, and scores predictions with panoptic quality. A synthetic
//! scene generator and an SGD training loop exercise the whole stack at desk
//! scale.

pub mod config;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod graphs;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod projection;
pub mod reasoning;
pub mod tensor;
pub mod toytask;

pub use error::{Error, Result};
