//! Desk-scale workbench for studying label leakage from shared gradients in
//! federated activity recognition.
//!
//! The crate simulates gradient-sharing clients over synthetic (or CSV-loaded)
//! activity streams, reconstructs per-batch label histograms from last-layer
//! gradients with five attacks (LLG, LLG*, LLBG, EBI, iLRG), applies local
//! differential-privacy transforms (clipping, Gaussian noise), and scores
//! leakage with LeAcc / LnAcc / ClassAcc plus client-level confusion matrices.

pub mod error;
pub mod attacks;
pub mod datagen;
pub mod model;
pub mod numerics;
pub mod sampler;

pub use error::{Error, Result};
