//! Unsupervised word segmentation from speech.
//!
//! The crate covers the whole cascade: acoustic features, discretization into
//! unit sequences (Bayesian phone-loop HMM / SHMM / H-SHMM and a frame-wise
//! VQ-VAE), unit post-processing, word segmentation (Dirichlet-process
//! unigram sampler or alignment-based), and boundary/token/type scoring.

pub mod align;
pub mod aud;
pub mod corpus;
pub mod dpseg;
pub mod error;
pub mod eval;
pub mod features;
pub mod mathx;
pub mod par;
pub mod persist;
pub mod pipeline;
pub mod seq;
pub mod units;
pub mod vq;

pub use error::{Result, UwsError};
pub use par::Exec;
