//! Dictionary learning and K-means clustering from compressive sketches.
//!
//! Data samples are never stored. Each block of samples is sketched with its
//! own random projection matrix (dense Gaussian or very sparse `{-1,0,+1}`),
//! and the dictionary is learned by alternating T-sparse coding in the sketch
//! domain with closed-form per-atom updates `G_k d_k = b_k`.
//!
//! The main entry points are [`sketching::sketch_blocks`], [`cksvd::train`],
//! [`kmeans::kmeans_train`], [`baseline::aksvd_train`] and
//! [`experiment::run_experiment`].

pub mod baseline;
pub mod cksvd;
pub mod config;
pub mod dictionary;
pub mod error;
pub mod experiment;
pub mod kmeans;
pub mod linalg;
pub mod matfile;
pub mod projections;
pub mod seed;
pub mod sketching;
pub mod sparse_coding;
pub mod theory;

#[cfg(test)]
pub(crate) mod testutil;

pub use dictionary::Dictionary;
pub use error::{Error, Result};
pub use linalg::SolveMode;
pub use projections::{ProjectionDistribution, ProjectionMatrix};
pub use sketching::{BlockPartition, SketchConfig, SketchedDataset};
pub use sparse_coding::{EquivalentDictionary, SparseCode, SparseCodeBlock};
