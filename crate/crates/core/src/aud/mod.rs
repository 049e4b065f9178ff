//! Bayesian acoustic unit discovery.
//!
//! Three discretizers share one phone-loop decoder: a variational HMM with
//! conjugate priors, a subspace HMM whose units are `decode(W e + b)`, and a
//! hierarchical variant whose subspace is a language-weighted mix of
//! templates.

mod hmm;
mod inference;
mod shmm;
mod subspace;
mod vb;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use hmm::{
    decode_params, encode_params, mixture_loglik, unit_label, HmmState, Mixture, PhoneLoop,
    Topology, UnitHmm, VAR_MAX, VAR_MIN,
};
pub use inference::{
    accumulate, forward_backward, viterbi_decode, viterbi_frame_labels, viterbi_path, LoopParams,
    Posteriors, SuffStats,
};
pub use shmm::{train_hshmm, train_shmm};
pub use subspace::{
    fit_hier_from_params, fit_hier_subspace, fit_subspace, fit_subspace_from_params, source_params,
    train_supervised_units, HierSubspace, LabeledCorpus, SourceParams, Subspace, SubspaceConfig,
};
pub use vb::{e_step, train_hmm, HmmPriors, NormalGamma, StatePosterior, VbPosterior};

use crate::corpus::FrameSequence;
use crate::error::{Result, UwsError};
use crate::par::Exec;
use crate::persist;
use crate::seq::UnitSequence;

pub const MODEL_MAGIC: &[u8; 4] = b"UWSA";
pub const SUBSPACE_MAGIC: &[u8; 4] = b"UWSS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudConfig {
    /// Truncation of the unit inventory.
    pub units: usize,
    pub n_states: usize,
    pub n_components: usize,
    pub iterations: usize,
    pub seed: u64,
    pub priors: HmmPriors,
    /// Spread of random initial means (HMM, in data standard deviations)
    /// or unit embeddings (subspace models).
    pub init_spread: f64,
    /// Initial step size of the embedding updates.
    pub learning_rate: f64,
    /// Gradient steps per M-step; 0 keeps the initial embeddings.
    pub inner_steps: usize,
    /// Whether the hierarchical model adapts its language embedding.
    pub update_language: bool,
}

impl Default for AudConfig {
    fn default() -> Self {
        AudConfig {
            units: 100,
            n_states: 3,
            n_components: 4,
            iterations: 10,
            seed: 0,
            priors: HmmPriors::default(),
            init_spread: 1.0,
            learning_rate: 1e-2,
            inner_steps: 10,
            update_language: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudKind {
    Hmm,
    Shmm,
    Hshmm,
}

impl std::fmt::Display for AudKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AudKind::Hmm => "hmm",
            AudKind::Shmm => "shmm",
            AudKind::Hshmm => "hshmm",
        })
    }
}

/// Lower bound after the initial E-step and after every iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AudTrace {
    pub elbo: Vec<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl AudTrace {
    /// Largest drop between consecutive bounds (0 when non-decreasing).
    pub fn max_decrease(&self) -> f64 {
        self.elbo
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }
}

/// A trained discretizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudModel {
    pub kind: AudKind,
    /// Point estimate of the parameters.
    pub phone_loop: PhoneLoop,
    /// Scores used for decoding (expected log-likelihoods for the HMM).
    pub scores: LoopParams,
    pub posterior: Option<VbPosterior>,
    pub embeddings: Option<Vec<Vec<f64>>>,
    pub language_embedding: Option<Vec<f64>>,
}

impl AudModel {
    pub fn silence_unit(&self) -> Option<usize> {
        self.phone_loop.silence_unit
    }

    /// Decoding scores: expected log-likelihoods or point estimates.
    pub fn params(&self, expected: bool) -> LoopParams {
        if expected {
            self.scores.clone()
        } else {
            self.phone_loop.point_params()
        }
    }

    pub fn decode(&self, seq: &FrameSequence) -> Result<UnitSequence> {
        viterbi_decode(seq, &self.scores, self.silence_unit())
    }

    pub fn frame_labels(&self, seq: &FrameSequence) -> Result<Vec<String>> {
        viterbi_frame_labels(seq, &self.scores, self.silence_unit())
    }

    pub fn decode_corpus(
        &self,
        features: &[FrameSequence],
        exec: Exec,
    ) -> Result<Vec<UnitSequence>> {
        exec.try_map(features, |f| self.decode(f))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::save(path, MODEL_MAGIC, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: AudModel = persist::load(path, MODEL_MAGIC)?;
        m.phone_loop.validate()?;
        m.scores.validate()?;
        Ok(m)
    }
}

/// Either kind of subspace, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubspaceFile {
    Flat(Subspace),
    Hier(HierSubspace),
}

impl SubspaceFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::save(path, SUBSPACE_MAGIC, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s: SubspaceFile = persist::load(path, SUBSPACE_MAGIC)?;
        match &s {
            SubspaceFile::Flat(f) => f.validate()?,
            SubspaceFile::Hier(h) => h.validate()?,
        }
        Ok(s)
    }
}

/// Fraction of frames whose hypothesis label maps to their gold label when
/// every hypothesis label is mapped to its most frequent gold label.
pub fn frame_purity<S: AsRef<str>, T: AsRef<str>>(hyp: &[Vec<S>], gold: &[Vec<T>]) -> Result<f64> {
    if hyp.len() != gold.len() {
        return Err(UwsError::dim(
            None,
            "hypothesis and gold utterance counts differ",
        ));
    }
    let mut table: HashMap<&str, HashMap<&str, usize>> = HashMap::new();
    let mut total = 0usize;
    for (h, g) in hyp.iter().zip(gold) {
        if h.len() != g.len() {
            return Err(UwsError::dim(
                None,
                format!("{} hypothesis frames vs {} gold frames", h.len(), g.len()),
            ));
        }
        for (a, b) in h.iter().zip(g) {
            *table
                .entry(a.as_ref())
                .or_default()
                .entry(b.as_ref())
                .or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(UwsError::invalid("frame purity", "no frames"));
    }
    let hits: usize = table
        .values()
        .map(|m| m.values().copied().max().unwrap_or(0))
        .sum();
    Ok(hits as f64 / total as f64)
}
