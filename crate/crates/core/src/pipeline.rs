//! End-to-end runs: features, discretization, post-processing, word
//! segmentation and scoring, with every intermediate written to a run
//! directory.
//!
//! Run directory layout:
//!
//! | file | stage |
//! |---|---|
//! | `config.json` | effective configuration |
//! | `features/<id>.uwsf` | features extracted from audio |
//! | `subspace.bin` | subspace fitted from source corpora |
//! | `model.aud` / `model.vq` | trained discretizer |
//! | `train_trace.json` | training trace |
//! | `units_raw.txt` | discretizer output |
//! | `units_post.txt`, `bpe.json` | segmenter input |
//! | `unit_stats.json` | unit statistics of both |
//! | `alignments.txt`, `dpseg_trace.json` | segmenter side outputs |
//! | `segmentation.txt` | final segmentation |
//! | `report.json` | scores and provenance |
//!
//! `stages.json` keeps a key per stage. A stage whose key and outputs are
//! already present is not recomputed.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::align::{
    load_alignments, oracle_alignment_over, segment_from_alignment, write_alignments,
    AlignmentMatrix,
};
use crate::aud::{
    fit_hier_subspace, fit_subspace, train_hmm, train_hshmm, train_shmm, AudConfig, AudModel,
    LabeledCorpus, SubspaceConfig, SubspaceFile,
};
use crate::corpus::textfmt::{
    read_segmentation_file, read_unit_file, write_segmentation_file, write_unit_file,
};
use crate::corpus::{
    load_manifest, read_features, write_features, CorpusManifest, FrameSequence, Interval,
};
use crate::dpseg::{gibbs_segment, DpsegConfig};
use crate::error::{Result, UwsError};
use crate::eval::{evaluate, EvalReport, Plane, DEFAULT_TOLERANCE_S};
use crate::features::{extract_batch, MfccConfig};
use crate::par::Exec;
use crate::seq::{Segmentation, UnitSequence, SIL};
use crate::units::{
    bpe_apply, bpe_learn, merge_windows, post_process, reintroduce_silence, unit_stats, PostMode,
    UnitStats, DEFAULT_MAX_LEN,
};
use crate::vq::{vqvae_train, VqVaeConfig, VqVaeModel};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const LOCK_FILE: &str = ".lock";
const STAGES_FILE: &str = "stages.json";
const REPORT_FILE: &str = "report.json";

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "lowercase")]
pub enum Discretizer {
    #[default]
    Hmm,
    Shmm,
    Hshmm,
    Vqvae,
    Gold,
}

impl Discretizer {
    pub fn display_name(self) -> &'static str {
        match self {
            Discretizer::Hmm => "HMM",
            Discretizer::Shmm => "SHMM",
            Discretizer::Hshmm => "H-SHMM",
            Discretizer::Vqvae => "VQ-VAE",
            Discretizer::Gold => "gold",
        }
    }
}

impl std::str::FromStr for Discretizer {
    type Err = UwsError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_ascii_lowercase()))
            .map_err(|_| UwsError::Config(format!("unknown discretizer {s:?}")))
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "lowercase")]
pub enum UwsMethod {
    #[default]
    Dpseg,
    Align,
    /// Every unit token is its own word.
    None,
}

impl UwsMethod {
    pub fn display_name(self) -> &'static str {
        match self {
            UwsMethod::Dpseg => "dpseg",
            UwsMethod::Align => "align",
            UwsMethod::None => "none",
        }
    }
}

impl std::str::FromStr for UwsMethod {
    type Err = UwsError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_ascii_lowercase()))
            .map_err(|_| UwsError::Config(format!("unknown segmenter {s:?}")))
    }
}

/// Where the subspace of the SHMM / H-SHMM comes from: a saved file, or
/// source manifests with gold units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SubspaceSource {
    pub path: Option<PathBuf>,
    pub sources: Vec<PathBuf>,
    pub config: SubspaceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignStageConfig {
    /// Soft alignments in the block format. Without it, alignments are
    /// synthesized from the gold words with `oracle_noise`.
    pub alignments: Option<PathBuf>,
    pub oracle_noise: f64,
}

impl Default for AlignStageConfig {
    fn default() -> Self {
        AlignStageConfig {
            alignments: None,
            oracle_noise: 0.2,
        }
    }
}

/// One self-contained run description. `seed` is copied into every seeded
/// stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub discretizer: Discretizer,
    pub post: PostMode,
    pub uws: UwsMethod,
    pub features: MfccConfig,
    pub aud: AudConfig,
    pub subspace: SubspaceSource,
    pub vqvae: VqVaeConfig,
    /// Target vocabulary of an optional BPE pass over the segmenter input.
    pub bpe_vocab: Option<usize>,
    pub max_len: usize,
    pub dpseg: DpsegConfig,
    pub align: AlignStageConfig,
    pub tolerance_s: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            manifest: PathBuf::new(),
            output_dir: PathBuf::new(),
            seed: 0,
            discretizer: Discretizer::default(),
            post: PostMode::default(),
            uws: UwsMethod::default(),
            features: MfccConfig::default(),
            aud: AudConfig::default(),
            subspace: SubspaceSource::default(),
            vqvae: VqVaeConfig::default(),
            bpe_vocab: None,
            max_len: DEFAULT_MAX_LEN,
            dpseg: DpsegConfig::default(),
            align: AlignStageConfig::default(),
            tolerance_s: DEFAULT_TOLERANCE_S,
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths are taken from the config's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| UwsError::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| UwsError::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or_else(|| Path::new(".")));
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.subspace.path {
            fix(p);
        }
        for p in &mut self.subspace.sources {
            fix(p);
        }
        if let Some(p) = &mut self.align.alignments {
            fix(p);
        }
    }

    /// Sets a field by dotted path, e.g. `dpseg.alpha0=5`. The value is
    /// parsed as JSON and falls back to a plain string.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| UwsError::Config(format!("override {assignment:?} is not key=value")))?;
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self).map_err(|e| UwsError::Format(e.to_string()))?;
        let mut node = &mut root;
        for part in key.split('.') {
            let obj = node.as_object_mut().ok_or_else(|| {
                UwsError::Config(format!(
                    "override {key:?}: {part:?} is not inside an object"
                ))
            })?;
            node = obj
                .get_mut(part)
                .ok_or_else(|| UwsError::Config(format!("override {key:?}: no field {part:?}")))?;
        }
        *node = value;
        *self = serde_json::from_value(root)
            .map_err(|e| UwsError::Config(format!("override {key:?}: {e}")))?;
        Ok(())
    }

    /// Stage configs with the run seed and length limit applied.
    pub fn effective(&self) -> PipelineConfig {
        let mut c = self.clone();
        c.aud.seed = self.seed;
        c.vqvae.seed = self.seed;
        c.dpseg.seed = self.seed;
        c.dpseg.max_len = self.max_len;
        c
    }

    /// Checks that do not need the manifest.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(UwsError::Config(m));
        if self.manifest.as_os_str().is_empty() {
            return cfg("manifest is required".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return cfg("output_dir is required".into());
        }
        if !(self.tolerance_s >= 0.0 && self.tolerance_s.is_finite()) {
            return cfg(format!(
                "tolerance_s must be non-negative, got {}",
                self.tolerance_s
            ));
        }
        if self.max_len == 0 {
            return cfg("max_len must be positive".into());
        }
        if matches!(self.discretizer, Discretizer::Shmm | Discretizer::Hshmm)
            && self.subspace.path.is_none()
            && self.subspace.sources.is_empty()
        {
            return cfg(format!(
                "{} needs subspace.path or subspace.sources",
                self.discretizer.display_name()
            ));
        }
        if self.discretizer == Discretizer::Hshmm
            && self.subspace.path.is_none()
            && self.subspace.sources.len() < 2
        {
            return cfg("H-SHMM needs at least two source corpora".into());
        }
        if !(0.0..1.0).contains(&self.align.oracle_noise) {
            return cfg(format!(
                "align.oracle_noise must lie in [0, 1), got {}",
                self.align.oracle_noise
            ));
        }
        if self.bpe_vocab == Some(0) {
            return cfg("bpe_vocab must be positive".into());
        }
        self.effective()
            .dpseg
            .validate()
            .map_err(|e| UwsError::Config(e.to_string()))
    }

    /// Checks that depend on what the corpus provides.
    pub fn validate_inputs(&self, manifest: &CorpusManifest) -> Result<()> {
        let missing = |what: &str, pred: &dyn Fn(&crate::corpus::Utterance) -> bool| match manifest
            .utterances
            .iter()
            .find(|u| !pred(u))
        {
            Some(u) => Err(UwsError::Config(format!(
                "utterance {} has no {what}",
                u.id
            ))),
            None => Ok(()),
        };
        if manifest.utterances.is_empty() {
            return Err(UwsError::Config("manifest lists no utterances".into()));
        }
        missing("features or audio", &|u| {
            u.feature_path.is_some() || u.audio_path.is_some()
        })?;
        if self.discretizer == Discretizer::Gold {
            missing("gold units (required by the gold discretizer)", &|u| {
                u.gold_units_path.is_some()
            })?;
        }
        if self.uws == UwsMethod::Align {
            missing("translation (required by the alignment segmenter)", &|u| {
                u.translation.as_ref().is_some_and(|t| !t.is_empty())
            })?;
            if self.align.alignments.is_none() {
                missing("gold words (required for oracle alignments)", &|u| {
                    u.gold_words_path.is_some()
                })?;
            }
        }
        let uses_audio = manifest.utterances.iter().any(|u| u.feature_path.is_none());
        if uses_audio && (self.features.hop_s - manifest.hop_s()).abs() > 1e-9 {
            return Err(UwsError::Config(format!(
                "feature hop {} s does not match the manifest frame rate {} Hz",
                self.features.hop_s, manifest.frame_rate_hz
            )));
        }
        Ok(())
    }

    /// Hash of the configuration independent of where the run is written.
    pub fn content_hash(&self) -> String {
        let mut c = self.effective();
        c.output_dir = PathBuf::from(".");
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

/// Experimental condition of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub corpus: String,
    pub discretizer: Discretizer,
    pub post: PostMode,
    pub uws: UwsMethod,
}

impl Condition {
    pub fn row_label(&self) -> String {
        let post = match self.post {
            PostMode::Raw => "RAW",
            PostMode::PlusSil => "+SIL",
        };
        format!("{} {post}", self.discretizer.display_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunUnitStats {
    /// Discretizer output as decoded, including silence tokens.
    pub raw: UnitStats,
    /// Segmenter input.
    pub post: UnitStats,
    /// Tokens dropped by silence removal.
    pub dropped_in_silence: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub crate_version: String,
    pub manifest_sha256: String,
    pub stage_keys: BTreeMap<String, String>,
    /// Content hash of every artifact in the run directory.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub condition: Condition,
    /// Absent when the corpus has no gold words.
    pub evaluation: Option<EvalReport>,
    pub unit_stats: RunUnitStats,
    /// Utterances passed to the segmenter unsegmented.
    pub skipped_utterances: Vec<String>,
    pub provenance: Provenance,
}

impl RunReport {
    pub fn boundary_f(&self) -> Option<f64> {
        self.evaluation.as_ref().map(|e| e.boundary.fscore)
    }

    pub fn load(run_dir: impl AsRef<Path>) -> Result<Self> {
        let path = run_dir.as_ref().join(REPORT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| UwsError::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| UwsError::parse(path.display().to_string(), e.to_string()))
    }
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(UwsError::Stage {
                stage: "lock".into(),
                utterance: None,
                message: format!(
                    "{} exists; another run owns this directory or left a stale lock",
                    path.display()
                ),
            }),
            Err(e) => Err(UwsError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| UwsError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| UwsError::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| UwsError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| UwsError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| UwsError::parse(path.display().to_string(), e.to_string()))
}

/// Features of every utterance, read from feature files or extracted from
/// audio. Extracted features are written to `write_dir` when given.
pub fn load_corpus_features(
    manifest: &CorpusManifest,
    mfcc: &MfccConfig,
    exec: Exec,
    write_dir: Option<&Path>,
) -> Result<Vec<FrameSequence>> {
    let hop = manifest.hop_s();
    let mut out: Vec<Option<FrameSequence>> = vec![None; manifest.utterances.len()];
    let mut from_audio = Vec::new();
    for (i, u) in manifest.utterances.iter().enumerate() {
        match (&u.feature_path, &u.audio_path) {
            (Some(p), _) => {
                let f = read_features(p, hop).map_err(|e| UwsError::in_utterance(&u.id, e))?;
                if f.utterance_id != u.id {
                    return Err(UwsError::invalid(
                        format!("features of {}", u.id),
                        format!("file {} holds utterance {}", p.display(), f.utterance_id),
                    ));
                }
                out[i] = Some(f);
            }
            (None, Some(a)) => from_audio.push((i, (u.id.clone(), a.clone()))),
            (None, None) => {
                return Err(UwsError::invalid(
                    format!("utterance {}", u.id),
                    "no features or audio",
                ))
            }
        }
    }
    if !from_audio.is_empty() {
        let items: Vec<(String, PathBuf)> = from_audio.iter().map(|(_, it)| it.clone()).collect();
        let feats = extract_batch(&items, mfcc, exec)?;
        if let Some(dir) = write_dir {
            std::fs::create_dir_all(dir).map_err(|e| UwsError::io(dir, e))?;
        }
        for ((i, (id, _)), f) in from_audio.into_iter().zip(feats) {
            if let Some(dir) = write_dir {
                write_features(&f, dir.join(format!("{id}.uwsf")))?;
            }
            out[i] = Some(f);
        }
    }
    for (u, f) in manifest.utterances.iter().zip(&out) {
        if let Some(f) = f {
            u.validate_duration(f.duration_s())
                .map_err(|e| UwsError::in_utterance(&u.id, e))?;
        }
    }
    Ok(out
        .into_iter()
        .map(|f| f.expect("every utterance loaded"))
        .collect())
}

/// Looks up per-utterance records in shared or per-utterance files.
struct ByIdFiles<T> {
    files: HashMap<PathBuf, HashMap<String, T>>,
}

impl<T: Clone> ByIdFiles<T> {
    fn new() -> Self {
        ByIdFiles {
            files: HashMap::new(),
        }
    }

    fn get(
        &mut self,
        path: &Path,
        id: &str,
        read: impl Fn(&Path) -> Result<Vec<T>>,
        key: impl Fn(&T) -> &str,
    ) -> Result<T> {
        if !self.files.contains_key(path) {
            let items = read(path)?;
            let map = items
                .into_iter()
                .map(|t| (key(&t).to_string(), t))
                .collect();
            self.files.insert(path.to_path_buf(), map);
        }
        self.files[path].get(id).cloned().ok_or_else(|| {
            UwsError::invalid(
                format!("utterance {id}"),
                format!("not found in {}", path.display()),
            )
        })
    }
}

/// Gold unit sequences of every utterance, in manifest order.
pub fn load_gold_units(manifest: &CorpusManifest) -> Result<Vec<UnitSequence>> {
    let mut cache = ByIdFiles::new();
    manifest
        .utterances
        .iter()
        .map(|u| {
            let p = u
                .gold_units_path
                .as_ref()
                .ok_or_else(|| UwsError::invalid(format!("utterance {}", u.id), "no gold units"))?;
            cache.get(
                p,
                &u.id,
                |p| read_unit_file(p),
                |s: &UnitSequence| &s.utterance_id,
            )
        })
        .collect()
}

/// Gold word segmentations, or `None` when any utterance lacks them.
pub fn load_gold_words(manifest: &CorpusManifest) -> Result<Option<Vec<Segmentation>>> {
    if manifest
        .utterances
        .iter()
        .any(|u| u.gold_words_path.is_none())
    {
        return Ok(None);
    }
    let mut cache = ByIdFiles::new();
    manifest
        .utterances
        .iter()
        .map(|u| {
            let p = u.gold_words_path.as_ref().expect("checked above");
            cache.get(
                p,
                &u.id,
                |p| read_segmentation_file(p),
                |s: &Segmentation| &s.utterance_id,
            )
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Frame labels from time-stamped units: the token covering each frame
/// centre, or silence.
pub fn frame_labels_from_units(units: &UnitSequence, n_frames: usize, hop_s: f64) -> Vec<String> {
    let mut labels = vec![SIL.to_string(); n_frames];
    for (i, l) in labels.iter_mut().enumerate() {
        let t = (i as f64 + 0.5) * hop_s;
        if let Some(tok) = units.tokens.iter().find(|k| k.start <= t && t < k.end) {
            l.clone_from(&tok.label);
        }
    }
    labels
}

/// A source corpus with gold units, labeled frame by frame.
pub fn labeled_corpus_from_manifest(
    path: &Path,
    mfcc: &MfccConfig,
    exec: Exec,
) -> Result<LabeledCorpus> {
    let manifest = load_manifest(path)?;
    let features = load_corpus_features(&manifest, mfcc, exec, None)?;
    let gold = load_gold_units(&manifest)?;
    let frame_labels = features
        .iter()
        .zip(&gold)
        .map(|(f, g)| frame_labels_from_units(g, f.n_frames(), f.hop_s))
        .collect();
    Ok(LabeledCorpus {
        name: manifest.name.clone(),
        features,
        frame_labels,
    })
}

fn stage_err(stage: &str) -> impl Fn(UwsError) -> UwsError + '_ {
    move |e| UwsError::stage(stage, e)
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    dir: &'a Path,
    manifest: &'a CorpusManifest,
    manifest_hash: String,
    exec: Exec,
    keys: BTreeMap<String, String>,
}

impl Run<'_> {
    /// Runs `body` unless the stage key and all `outputs` are on disk.
    fn stage(
        &mut self,
        name: &str,
        material: Value,
        upstream: Option<&str>,
        outputs: &[&str],
        body: impl FnOnce(&mut Self) -> Result<()>,
    ) -> Result<String> {
        let up = upstream
            .and_then(|u| self.keys.get(u))
            .cloned()
            .unwrap_or_default();
        let key = sha256_hex(
            serde_json::to_string(&serde_json::json!({
                "stage": name,
                "version": VERSION,
                "manifest": self.manifest_hash,
                "upstream": up,
                "config": material,
            }))
            .expect("stage key serializes")
            .as_bytes(),
        );
        let stages_path = self.dir.join(STAGES_FILE);
        let done =
            self.keys.get(name) == Some(&key) && outputs.iter().all(|o| self.dir.join(o).exists());
        if done {
            log::info!("{name}: up to date");
        } else {
            self.keys.remove(name);
            write_json(&stages_path, &self.keys)?;
            body(self).map_err(stage_err(name))?;
            self.keys.insert(name.to_string(), key.clone());
            write_json(&stages_path, &self.keys)?;
        }
        Ok(key)
    }

    fn features(&self) -> Result<Vec<FrameSequence>> {
        load_corpus_features(
            self.manifest,
            &self.cfg.features,
            self.exec,
            Some(&self.dir.join("features")),
        )
    }

    fn silences(&self) -> Vec<Vec<Interval>> {
        self.manifest
            .utterances
            .iter()
            .map(|u| u.silences.clone())
            .collect()
    }

    fn discretize(&mut self) -> Result<Vec<UnitSequence>> {
        let cfg = self.cfg;
        let material = match cfg.discretizer {
            Discretizer::Gold => Value::Null,
            Discretizer::Hmm => serde_json::json!({ "features": cfg.features, "aud": cfg.aud }),
            Discretizer::Shmm | Discretizer::Hshmm => {
                let sub = match &cfg.subspace.path {
                    Some(p) => Value::String(file_sha256(p)?),
                    None => {
                        let hashes: Vec<String> = cfg
                            .subspace
                            .sources
                            .iter()
                            .map(|p| file_sha256(p))
                            .collect::<Result<_>>()?;
                        serde_json::json!({ "sources": hashes, "config": cfg.subspace.config })
                    }
                };
                serde_json::json!({ "features": cfg.features, "aud": cfg.aud, "subspace": sub })
            }
            Discretizer::Vqvae => {
                serde_json::json!({ "features": cfg.features, "vqvae": cfg.vqvae })
            }
        };
        let material = serde_json::json!({ "discretizer": cfg.discretizer, "settings": material });
        self.stage("discretize", material, None, &["units_raw.txt"], |run| {
            let units = run.train_and_decode()?;
            write_unit_file(&units, run.dir.join("units_raw.txt"), true)
        })?;
        read_unit_file(self.dir.join("units_raw.txt"))
    }

    fn train_and_decode(&mut self) -> Result<Vec<UnitSequence>> {
        let cfg = self.cfg;
        if cfg.discretizer == Discretizer::Gold {
            return load_gold_units(self.manifest);
        }
        let features = self.features()?;
        let hop = self.manifest.hop_s();
        let exec = self.exec;
        if cfg.discretizer == Discretizer::Vqvae {
            let (model, trace) = vqvae_train(&features, &cfg.vqvae, exec)?;
            model.save(self.dir.join("model.vq"))?;
            write_json(&self.dir.join("train_trace.json"), &trace)?;
            return exec.try_map(&features, |f| decode_vq(&model, f, hop));
        }
        let silences = self.silences();
        let (model, trace) = match cfg.discretizer {
            Discretizer::Hmm => train_hmm(&features, &silences, &cfg.aud, exec)?,
            Discretizer::Shmm | Discretizer::Hshmm => {
                let sub = self.subspace()?;
                match (cfg.discretizer, &sub) {
                    (Discretizer::Shmm, SubspaceFile::Flat(s)) => {
                        train_shmm(&features, &silences, s, &cfg.aud, exec)?
                    }
                    (Discretizer::Hshmm, SubspaceFile::Hier(h)) => {
                        train_hshmm(&features, &silences, h, &cfg.aud, exec)?
                    }
                    _ => {
                        return Err(UwsError::Config(format!(
                            "subspace file does not match the {} discretizer",
                            cfg.discretizer.display_name()
                        )))
                    }
                }
            }
            Discretizer::Vqvae | Discretizer::Gold => unreachable!("handled above"),
        };
        model.save(self.dir.join("model.aud"))?;
        write_json(&self.dir.join("train_trace.json"), &trace)?;
        decode_aud(&model, &features, exec)
    }

    fn subspace(&self) -> Result<SubspaceFile> {
        let cfg = self.cfg;
        if let Some(p) = &cfg.subspace.path {
            return SubspaceFile::load(p);
        }
        let sources: Vec<LabeledCorpus> = cfg
            .subspace
            .sources
            .iter()
            .map(|p| labeled_corpus_from_manifest(p, &cfg.features, self.exec))
            .collect::<Result<_>>()?;
        let file = if cfg.discretizer == Discretizer::Hshmm {
            SubspaceFile::Hier(fit_hier_subspace(
                &sources,
                &cfg.subspace.config,
                self.exec,
            )?)
        } else {
            SubspaceFile::Flat(fit_subspace(&sources, &cfg.subspace.config, self.exec)?)
        };
        file.save(self.dir.join("subspace.bin"))?;
        Ok(file)
    }

    fn post(&mut self, raw: &[UnitSequence]) -> Result<(Vec<UnitSequence>, RunUnitStats)> {
        let cfg = self.cfg;
        let material = serde_json::json!({ "post": cfg.post, "bpe_vocab": cfg.bpe_vocab, "max_len": cfg.max_len });
        let mut outputs = vec!["units_post.txt", "unit_stats.json"];
        if cfg.bpe_vocab.is_some() {
            outputs.push("bpe.json");
        }
        self.stage("post", material, Some("discretize"), &outputs, |run| {
            let silences = run.silences();
            let mut post = Vec::with_capacity(raw.len());
            let mut kept = 0;
            let mut stripped = 0;
            for (s, sil) in raw.iter().zip(&silences) {
                let p = post_process(s, sil, cfg.post)?;
                stripped += s.without_silence_tokens().len();
                kept += p.len();
                post.push(p);
            }
            if let Some(vocab) = cfg.bpe_vocab {
                let model = bpe_learn(&post, vocab)?;
                write_json(&run.dir.join("bpe.json"), &model)?;
                post = post
                    .iter()
                    .map(|s| bpe_apply(s, &model))
                    .collect::<Result<_>>()?;
            }
            let stats = RunUnitStats {
                raw: unit_stats(raw, cfg.max_len)?,
                post: unit_stats(&post, cfg.max_len)?,
                dropped_in_silence: stripped - kept,
            };
            write_unit_file(&post, run.dir.join("units_post.txt"), true)?;
            write_json(&run.dir.join("unit_stats.json"), &stats)
        })?;
        let post = read_unit_file(self.dir.join("units_post.txt"))?;
        let stats: RunUnitStats = read_json(&self.dir.join("unit_stats.json"))?;
        Ok((post, stats))
    }

    fn segment(&mut self, units: &[UnitSequence], skipped: &[String]) -> Result<Vec<Segmentation>> {
        let cfg = self.cfg;
        let material = match cfg.uws {
            UwsMethod::Dpseg => serde_json::to_value(&cfg.dpseg).expect("dpseg config serializes"),
            UwsMethod::Align => match &cfg.align.alignments {
                Some(p) => serde_json::json!({ "alignments": file_sha256(p)? }),
                None => {
                    serde_json::json!({ "oracle_noise": cfg.align.oracle_noise, "seed": cfg.seed })
                }
            },
            UwsMethod::None => Value::Null,
        };
        let material = serde_json::json!({ "uws": cfg.uws, "settings": material });
        self.stage(
            "uws",
            material,
            Some("post"),
            &["segmentation.txt"],
            |run| {
                let segs = run.segment_now(units, skipped)?;
                let segs = match cfg.post {
                    PostMode::Raw => segs,
                    PostMode::PlusSil => segs
                        .iter()
                        .zip(&run.manifest.utterances)
                        .map(|(s, u)| {
                            reintroduce_silence(s, &u.silences)
                                .map_err(|e| UwsError::in_utterance(&u.id, e))
                        })
                        .collect::<Result<_>>()?,
                };
                write_segmentation_file(&segs, run.dir.join("segmentation.txt"), true)
            },
        )?;
        read_segmentation_file(self.dir.join("segmentation.txt"))
    }

    fn segment_now(
        &mut self,
        units: &[UnitSequence],
        skipped: &[String],
    ) -> Result<Vec<Segmentation>> {
        let cfg = self.cfg;
        let whole = |s: &UnitSequence| {
            Segmentation::from_boundaries(s, &vec![false; s.len().saturating_sub(1)])
        };
        match cfg.uws {
            UwsMethod::None => Ok(units
                .iter()
                .map(|s| Segmentation::from_boundaries(s, &vec![true; s.len().saturating_sub(1)]))
                .collect()),
            UwsMethod::Dpseg => {
                let (kept, idx): (Vec<UnitSequence>, Vec<usize>) = units
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| !skipped.contains(&s.utterance_id))
                    .map(|(i, s)| (s.clone(), i))
                    .unzip();
                let mut out: Vec<Segmentation> = units.iter().map(whole).collect();
                if !kept.is_empty() {
                    let res = gibbs_segment(&kept, &cfg.dpseg)?;
                    write_json(&self.dir.join("dpseg_trace.json"), &res.trace)?;
                    for (i, s) in idx.into_iter().zip(res.segmentations) {
                        out[i] = s;
                    }
                }
                Ok(out)
            }
            UwsMethod::Align => {
                let mats = match &cfg.align.alignments {
                    Some(p) => {
                        let by_id: HashMap<String, AlignmentMatrix> = load_alignments(p)?
                            .into_iter()
                            .map(|m| (m.utterance_id.clone(), m))
                            .collect();
                        units
                            .iter()
                            .map(|s| {
                                by_id
                                    .get(&s.utterance_id)
                                    .cloned()
                                    .ok_or_else(|| UwsError::Stage {
                                        stage: "uws".into(),
                                        utterance: Some(s.utterance_id.clone()),
                                        message: format!("no alignment in {}", p.display()),
                                    })
                            })
                            .collect::<Result<Vec<_>>>()?
                    }
                    None => {
                        let gold = load_gold_words(self.manifest)?.ok_or_else(|| {
                            UwsError::Config("oracle alignments need gold words".into())
                        })?;
                        let mats = units
                            .iter()
                            .zip(&gold)
                            .zip(&self.manifest.utterances)
                            .enumerate()
                            .map(|(i, ((s, g), u))| {
                                let cols = u.translation.as_ref().map_or(0, Vec::len);
                                oracle_alignment_over(
                                    s,
                                    g,
                                    cols,
                                    cfg.align.oracle_noise,
                                    cfg.seed.wrapping_add(i as u64),
                                )
                                .map_err(|e| UwsError::in_utterance(&u.id, e))
                            })
                            .collect::<Result<Vec<_>>>()?;
                        write_alignments(&mats, self.dir.join("alignments.txt"))?;
                        mats
                    }
                };
                units
                    .iter()
                    .zip(&mats)
                    .map(|(s, m)| {
                        segment_from_alignment(s, m)
                            .map_err(|e| UwsError::in_utterance(&s.utterance_id, e))
                    })
                    .collect()
            }
        }
    }
}

fn decode_vq(model: &VqVaeModel, f: &FrameSequence, hop: f64) -> Result<UnitSequence> {
    let labels = model.decode_units(f);
    merge_windows(&f.utterance_id, &labels.labels, hop)
}

fn decode_aud(
    model: &AudModel,
    features: &[FrameSequence],
    exec: Exec,
) -> Result<Vec<UnitSequence>> {
    exec.try_map(features, |f| {
        model
            .decode(f)
            .map_err(|e| UwsError::in_utterance(&f.utterance_id, e))
    })
}

/// Runs every stage into `cfg.output_dir` and writes `report.json`.
pub fn run_pipeline(cfg: &PipelineConfig, exec: Exec) -> Result<RunReport> {
    cfg.validate()?;
    let eff = cfg.effective();
    let manifest = load_manifest(&eff.manifest).map_err(stage_err("input"))?;
    eff.validate_inputs(&manifest)?;
    let dir = eff.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| UwsError::io(dir, e))?;
    let _lock = RunLock::acquire(dir)?;

    let mut stored = eff.clone();
    stored.output_dir = PathBuf::from(".");
    stored.save(dir.join("config.json"))?;

    let keys: BTreeMap<String, String> = match dir.join(STAGES_FILE) {
        p if p.exists() => read_json(&p).unwrap_or_default(),
        _ => BTreeMap::new(),
    };
    let mut run = Run {
        cfg: &eff,
        dir,
        manifest: &manifest,
        manifest_hash: file_sha256(&eff.manifest)?,
        exec,
        keys,
    };

    let raw = run.discretize()?;
    log::info!("discretize: {} sequences", raw.len());
    let (post, stats) = run.post(&raw)?;
    let skipped = if eff.uws == UwsMethod::Dpseg {
        stats.post.over_length.clone()
    } else {
        Vec::new()
    };
    for id in &skipped {
        log::warn!(
            "utterance {id} exceeds {} tokens and is left unsegmented",
            eff.max_len
        );
    }
    let segs = run.segment(&post, &skipped)?;
    let evaluation = match load_gold_words(&manifest).map_err(stage_err("eval"))? {
        Some(gold) => {
            Some(evaluate(&segs, &gold, Plane::Time, eff.tolerance_s).map_err(stage_err("eval"))?)
        }
        None => {
            log::warn!("corpus has no gold words; skipping evaluation");
            None
        }
    };

    let report = RunReport {
        condition: Condition {
            corpus: manifest.name.clone(),
            discretizer: eff.discretizer,
            post: eff.post,
            uws: eff.uws,
        },
        evaluation,
        unit_stats: stats,
        skipped_utterances: skipped,
        provenance: Provenance {
            config_sha256: cfg.content_hash(),
            seed: eff.seed,
            crate_version: VERSION.to_string(),
            manifest_sha256: run.manifest_hash.clone(),
            stage_keys: run.keys.clone(),
            artifacts: artifact_hashes(dir)?,
        },
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Hashes of all files under `dir` except the report and the lock.
pub fn artifact_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| UwsError::io(&d, e))? {
            let path = entry.map_err(|e| UwsError::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(dir)
                .expect("under run dir")
                .to_string_lossy()
                .replace('\\', "/");
            if rel == REPORT_FILE || rel == LOCK_FILE {
                continue;
            }
            out.insert(rel, file_sha256(&path)?);
        }
    }
    Ok(out)
}

/// Boundary F-scores of several runs: rows are discretizer and
/// post-processing, columns are segmenters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub cells: Vec<Option<f64>>,
}

impl ReportTable {
    pub fn from_reports(reports: &[RunReport]) -> Result<Self> {
        let mut cols: Vec<UwsMethod> = reports.iter().map(|r| r.condition.uws).collect();
        cols.sort();
        cols.dedup();
        let mut rows: BTreeMap<(Discretizer, u8), Vec<Option<f64>>> = BTreeMap::new();
        let mut seen: BTreeMap<(Discretizer, u8, UwsMethod), ()> = BTreeMap::new();
        for r in reports {
            let c = &r.condition;
            let post = matches!(c.post, PostMode::PlusSil) as u8;
            if seen.insert((c.discretizer, post, c.uws), ()).is_some() {
                return Err(UwsError::invalid(
                    "report",
                    format!(
                        "two runs share the condition {} / {}",
                        c.row_label(),
                        c.uws.display_name()
                    ),
                ));
            }
            let col = cols
                .iter()
                .position(|u| *u == c.uws)
                .expect("column collected");
            rows.entry((c.discretizer, post))
                .or_insert_with(|| vec![None; cols.len()])[col] = r.boundary_f();
        }
        let labels: HashMap<(Discretizer, u8), String> = reports
            .iter()
            .map(|r| {
                (
                    (
                        r.condition.discretizer,
                        matches!(r.condition.post, PostMode::PlusSil) as u8,
                    ),
                    r.condition.row_label(),
                )
            })
            .collect();
        Ok(ReportTable {
            columns: cols.iter().map(|u| u.display_name().to_string()).collect(),
            rows: rows
                .into_iter()
                .map(|(k, cells)| ReportRow {
                    label: labels[&k].clone(),
                    cells,
                })
                .collect(),
        })
    }

    /// Boundary F in percent with two decimals; `-` when a run was not
    /// scored or is missing.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| condition |");
        for c in &self.columns {
            let _ = write!(out, " {c} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.columns.len()));
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "| {} |", r.label);
            for c in &r.cells {
                match c {
                    Some(f) => {
                        let _ = write!(out, " {:.2} |", 100.0 * f);
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Loads `report.json` from each run directory and tabulates boundary F.
pub fn render_report(run_dirs: &[PathBuf]) -> Result<(String, ReportTable)> {
    if run_dirs.is_empty() {
        return Err(UwsError::invalid("report", "no run directories given"));
    }
    let reports: Vec<RunReport> = run_dirs
        .iter()
        .map(RunReport::load)
        .collect::<Result<_>>()?;
    let table = ReportTable::from_reports(&reports)?;
    Ok((table.to_markdown(), table))
}
