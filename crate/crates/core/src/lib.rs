//! Pedestrian trajectory prediction from motion, gaze-weighted scene point
//! clouds and temporal heterogeneous scene graphs, with a synthetic VR
//! session generator and the full training and evaluation pipeline.

// `!(x > 0.0)` is used deliberately so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod domain;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod layout;
pub mod model;
pub mod scenegraph;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
