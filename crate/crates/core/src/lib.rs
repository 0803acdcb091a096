//! Cascaded cross-view image translation with semantic guidance and
//! multi-channel attention selection.
//!
//! Stage I maps a condition view and a target-view semantic map to a coarse
//! target view, then reconstructs the semantics from it. Stage II fuses the
//! stage-I features, produces several candidate images with matching
//! attention maps, and blends them into the refined output while learning
//! per-pixel uncertainty maps that reweight the pixel losses.

pub mod attention;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod networks;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
