//! Corpus data model: manifests, feature matrices, text formats and the
//! synthetic corpus generator.

mod featio;
mod manifest;
pub mod synthetic;
pub mod textfmt;

pub use featio::{read_features, write_features, FrameSequence, FEATURE_MAGIC};
pub use manifest::{load_manifest, save_manifest, CorpusManifest, Interval, Utterance};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec, UnitEmission};
