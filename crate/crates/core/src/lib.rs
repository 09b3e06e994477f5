//! Patch-based bleeding segmentation for capsule endoscopy frames with compressed
//! classifiers.
//!
//! The pipeline runs in this order:
//!
//! 1. [`colorspace`] turns 8-bit RGB frames into candidate channels.
//! 2. [`channel_select`] ranks channel combinations by mutual information with the mask.
//! 3. [`dataset`] cuts labeled patches around pixels and rebalances the classes.
//! 4. [`nn`] trains the MLP or CNN patch classifier.
//! 5. [`compress`] binarizes and prunes weights during training.
//! 6. [`inference`] freezes a trained network and segments whole frames. Binarized
//!    layers run without multiplications.
//! 7. [`metrics`] and [`complexity`] report DICE/AUC and weight and energy budgets.

pub mod channel_select;
pub mod checkpoint;
pub mod colorspace;
pub mod complexity;
pub mod compress;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
