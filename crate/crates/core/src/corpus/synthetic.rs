//! Synthetic corpora with known units, words and silences.
//!
//! Each unit is a left-to-right Gaussian HMM (one diagonal Gaussian per
//! state, shared standard deviation). Words are unit strings drawn from a
//! lexicon; utterances are word sequences with optional silences between and
//! around the words.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::featio::{write_features, FrameSequence};
use super::manifest::{save_manifest, CorpusManifest, Interval, Utterance};
use super::textfmt::{write_frame_labels, write_segmentation_file, write_unit_file, FrameLabels};
use crate::error::{Result, UwsError};
use crate::seq::{Segmentation, UnitSequence, UnitToken, Word, SIL};

/// Emission means of one unit, one vector per HMM state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEmission {
    pub state_means: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_units: usize,
    #[serde(default = "defaults::states")]
    pub unit_hmm_states: usize,
    pub feature_dim: usize,
    /// Words as unit strings: `"01"` (one digit per unit) or `"0-1"`.
    pub lexicon: Vec<String>,
    pub word_dist: Vec<f64>,
    pub utterance_length_words: (usize, usize),
    pub n_utterances: usize,
    pub silence_prob: f64,
    pub seed: u64,
    #[serde(default = "defaults::separation")]
    pub mean_separation: f64,
    #[serde(default = "defaults::std")]
    pub emission_std: f64,
    #[serde(default = "defaults::self_loop")]
    pub self_loop_prob: f64,
    #[serde(default = "defaults::silence_frames")]
    pub silence_frames: (usize, usize),
    #[serde(default = "defaults::frame_rate")]
    pub frame_rate_hz: f64,
    /// Explicit unit emissions; sampled from `seed` when absent.
    #[serde(default)]
    pub units: Option<Vec<UnitEmission>>,
    #[serde(default)]
    pub silence_mean: Option<Vec<f64>>,
    #[serde(default = "defaults::prefix")]
    pub id_prefix: String,
}

mod defaults {
    pub fn states() -> usize {
        3
    }
    pub fn separation() -> f64 {
        4.0
    }
    pub fn std() -> f64 {
        1.0
    }
    pub fn self_loop() -> f64 {
        0.6
    }
    pub fn silence_frames() -> (usize, usize) {
        (15, 40)
    }
    pub fn frame_rate() -> f64 {
        100.0
    }
    pub fn prefix() -> String {
        "utt".into()
    }
}

impl SyntheticSpec {
    /// A spec with defaults for everything except the essentials.
    pub fn new(
        n_units: usize,
        feature_dim: usize,
        lexicon: &[&str],
        n_utterances: usize,
        seed: u64,
    ) -> Self {
        let k = lexicon.len().max(1);
        SyntheticSpec {
            n_units,
            unit_hmm_states: defaults::states(),
            feature_dim,
            lexicon: lexicon.iter().map(|s| s.to_string()).collect(),
            word_dist: vec![1.0 / k as f64; lexicon.len()],
            utterance_length_words: (2, 6),
            n_utterances,
            silence_prob: 0.0,
            seed,
            mean_separation: defaults::separation(),
            emission_std: defaults::std(),
            self_loop_prob: defaults::self_loop(),
            silence_frames: defaults::silence_frames(),
            frame_rate_hz: defaults::frame_rate(),
            units: None,
            silence_mean: None,
            id_prefix: defaults::prefix(),
        }
    }

    pub fn parsed_lexicon(&self) -> Result<Vec<Vec<usize>>> {
        self.lexicon
            .iter()
            .map(|w| parse_word(w, self.n_units))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UwsError::invalid("synthetic spec", m));
        if self.n_units == 0 || self.unit_hmm_states == 0 || self.feature_dim == 0 {
            return bad("n_units, unit_hmm_states and feature_dim must be >= 1".into());
        }
        if self.lexicon.is_empty() || self.lexicon.len() != self.word_dist.len() {
            return bad("lexicon must be nonempty and match word_dist in length".into());
        }
        self.parsed_lexicon()?;
        let sum: f64 = self.word_dist.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.word_dist.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return bad(format!(
                "word_dist must be a probability vector (sum {sum})"
            ));
        }
        let (lo, hi) = self.utterance_length_words;
        if lo == 0 || lo > hi {
            return bad(format!(
                "utterance_length_words ({lo}, {hi}) must satisfy 1 <= min <= max"
            ));
        }
        if !(0.0..=1.0).contains(&self.silence_prob) {
            return bad("silence_prob must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.self_loop_prob) {
            return bad("self_loop_prob must be in [0, 1)".into());
        }
        let (slo, shi) = self.silence_frames;
        if slo == 0 || slo > shi {
            return bad("silence_frames must satisfy 1 <= min <= max".into());
        }
        if !(self.emission_std > 0.0) || !(self.frame_rate_hz > 0.0) {
            return bad("emission_std and frame_rate_hz must be positive".into());
        }
        if let Some(units) = &self.units {
            if units.len() != self.n_units
                || units.iter().any(|u| {
                    u.state_means.len() != self.unit_hmm_states
                        || u.state_means.iter().any(|m| m.len() != self.feature_dim)
                })
            {
                return bad("explicit units do not match n_units/states/feature_dim".into());
            }
        }
        if let Some(m) = &self.silence_mean {
            if m.len() != self.feature_dim {
                return bad("silence_mean has wrong dimension".into());
            }
        }
        Ok(())
    }
}

/// Parses `"012"` (single-digit units) or `"0-1-2"`.
pub fn parse_word(word: &str, n_units: usize) -> Result<Vec<usize>> {
    let symbols: Vec<&str> = if word.contains('-') {
        word.split('-').collect()
    } else {
        word.char_indices()
            .map(|(i, c)| &word[i..i + c.len_utf8()])
            .collect()
    };
    if symbols.is_empty() || word.is_empty() {
        return Err(UwsError::invalid("lexicon", "empty word"));
    }
    symbols
        .iter()
        .map(|s| {
            s.parse::<usize>()
                .ok()
                .filter(|u| *u < n_units)
                .ok_or_else(|| {
                    UwsError::invalid(
                        "lexicon",
                        format!("word {word:?}: symbol {s:?} not in [0, {n_units})"),
                    )
                })
        })
        .collect()
}

/// Hidden parameters used to generate a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub units: Vec<UnitEmission>,
    pub silence_mean: Vec<f64>,
    pub emission_std: f64,
    pub self_loop_prob: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub manifest: CorpusManifest,
    pub features: Vec<FrameSequence>,
    pub gold_units: Vec<UnitSequence>,
    pub gold_words: Vec<Segmentation>,
    /// Per-frame gold labels, `"sil"` inside silences.
    pub frame_labels: Vec<Vec<String>>,
    /// Lexicon index of every gold word.
    pub word_ids: Vec<Vec<usize>>,
    pub params: GeneratorParams,
}

/// Samples `count` points in `dim` dimensions with pairwise distance >= `sep`.
pub fn separated_points(count: usize, dim: usize, sep: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    // Box side grows until rejection sampling succeeds.
    let mut half = 0.5 * sep * (count as f64).powf(1.0 / dim as f64).max(1.0);
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut failures = 0;
    while points.len() < count {
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-half..=half)).collect();
        if points
            .iter()
            .all(|q| crate::mathx::squared_distance(&p, q) >= sep * sep)
        {
            points.push(p);
            failures = 0;
        } else {
            failures += 1;
            if failures > 200 {
                half *= 1.1;
                failures = 0;
            }
        }
    }
    points
}

/// A bank of unit emissions plus a silence mean, all pairwise separated.
pub fn unit_bank(
    n_units: usize,
    states: usize,
    dim: usize,
    sep: f64,
    seed: u64,
) -> (Vec<UnitEmission>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba4c);
    let mut pts = separated_points(n_units * states + 1, dim, sep, &mut rng);
    let silence = pts.pop().unwrap();
    let units = pts
        .chunks(states)
        .map(|c| UnitEmission {
            state_means: c.to_vec(),
        })
        .collect();
    (units, silence)
}

fn normal_frame(mean: &[f64], std: f64, rng: &mut impl Rng) -> Vec<f64> {
    mean.iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            // stored values are f32-representable so feature files round-trip exactly
            (m + std * z) as f32 as f64
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let lexicon = spec.parsed_lexicon()?;
    let (units, silence_mean) = match (&spec.units, &spec.silence_mean) {
        (Some(u), Some(s)) => (u.clone(), s.clone()),
        (units, sil) => {
            let (bank, bank_sil) = unit_bank(
                spec.n_units,
                spec.unit_hmm_states,
                spec.feature_dim,
                spec.mean_separation * spec.emission_std,
                spec.seed,
            );
            (
                units.clone().unwrap_or(bank),
                sil.clone().unwrap_or(bank_sil),
            )
        }
    };
    let params = GeneratorParams {
        units,
        silence_mean,
        emission_std: spec.emission_std,
        self_loop_prob: spec.self_loop_prob,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let word_sampler = WeightedIndex::new(&spec.word_dist)
        .map_err(|e| UwsError::invalid("synthetic spec", e.to_string()))?;
    let hop = 1.0 / spec.frame_rate_hz;
    let width = (spec.n_utterances.max(1) as f64).log10().floor() as usize + 1;

    let mut manifest = CorpusManifest::new(format!("synthetic-{}", spec.seed));
    manifest.frame_rate_hz = spec.frame_rate_hz;
    let mut out = SyntheticCorpus {
        spec: spec.clone(),
        manifest: CorpusManifest::new(""),
        features: Vec::new(),
        gold_units: Vec::new(),
        gold_words: Vec::new(),
        frame_labels: Vec::new(),
        word_ids: Vec::new(),
        params,
    };

    for k in 0..spec.n_utterances {
        let id = format!("{}{:0width$}", spec.id_prefix, k, width = width);
        let mut frames: Vec<f64> = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        let mut silences = Vec::new();
        let mut words = Vec::new();
        let mut ids = Vec::new();
        let mut translation = Vec::new();

        let emit_silence =
            |frames: &mut Vec<f64>, labels: &mut Vec<String>, rng: &mut ChaCha8Rng| {
                let n = rng.random_range(spec.silence_frames.0..=spec.silence_frames.1);
                let start = labels.len();
                for _ in 0..n {
                    frames.extend(normal_frame(
                        &out.params.silence_mean,
                        spec.emission_std,
                        rng,
                    ));
                    labels.push(SIL.to_owned());
                }
                Interval::new(start as f64 * hop, labels.len() as f64 * hop)
            };

        let n_words =
            rng.random_range(spec.utterance_length_words.0..=spec.utterance_length_words.1);
        if rng.random_bool(spec.silence_prob) {
            silences.push(emit_silence(&mut frames, &mut labels, &mut rng));
        }
        for w in 0..n_words {
            let widx = word_sampler.sample(&mut rng);
            ids.push(widx);
            translation.push(format!("w{widx}"));
            let mut toks = Vec::new();
            for &u in &lexicon[widx] {
                let start = labels.len();
                for s in 0..spec.unit_hmm_states {
                    loop {
                        frames.extend(normal_frame(
                            &out.params.units[u].state_means[s],
                            spec.emission_std,
                            &mut rng,
                        ));
                        labels.push(u.to_string());
                        if !rng.random_bool(spec.self_loop_prob) {
                            break;
                        }
                    }
                }
                toks.push(UnitToken::new(
                    u.to_string(),
                    start as f64 * hop,
                    labels.len() as f64 * hop,
                ));
            }
            words.push(Word::new(toks));
            if w + 1 < n_words && rng.random_bool(spec.silence_prob) {
                silences.push(emit_silence(&mut frames, &mut labels, &mut rng));
            }
        }
        if rng.random_bool(spec.silence_prob) {
            silences.push(emit_silence(&mut frames, &mut labels, &mut rng));
        }

        let seg = Segmentation::new(id.clone(), words);
        let mut utt = Utterance::new(id.clone());
        utt.silences = silences;
        utt.translation = Some(translation);
        manifest.utterances.push(utt);
        out.features.push(FrameSequence::new(
            id.clone(),
            spec.feature_dim,
            frames,
            hop,
        )?);
        out.gold_units.push(seg.units());
        out.gold_words.push(seg);
        out.frame_labels.push(labels);
        out.word_ids.push(ids);
    }
    out.manifest = manifest;
    Ok(out)
}

impl SyntheticCorpus {
    /// Word-end times of every gold word except the last in each utterance.
    pub fn gold_word_end_times(&self) -> Vec<Vec<f64>> {
        self.gold_words
            .iter()
            .map(|s| s.words[..s.words.len() - 1].iter().map(Word::end).collect())
            .collect()
    }

    /// Writes features, gold files and a manifest with relative paths.
    /// Returns the manifest path.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let feats = dir.join("feats");
        std::fs::create_dir_all(&feats).map_err(|e| UwsError::io(&feats, e))?;
        let mut manifest = self.manifest.clone();
        for (utt, f) in manifest.utterances.iter_mut().zip(&self.features) {
            let rel = PathBuf::from("feats").join(format!("{}.uwsf", utt.id));
            write_features(f, dir.join(&rel))?;
            utt.feature_path = Some(rel);
            utt.gold_units_path = Some(PathBuf::from("gold_units.txt"));
            utt.gold_words_path = Some(PathBuf::from("gold_words.txt"));
        }
        write_unit_file(&self.gold_units, dir.join("gold_units.txt"), true)?;
        write_segmentation_file(&self.gold_words, dir.join("gold_words.txt"), true)?;
        let fl: Vec<FrameLabels> = self
            .manifest
            .utterances
            .iter()
            .zip(&self.frame_labels)
            .map(|(u, l)| FrameLabels {
                utterance_id: u.id.clone(),
                labels: l.clone(),
            })
            .collect();
        write_frame_labels(&fl, dir.join("gold_frames.txt"))?;
        let params = serde_json::to_string_pretty(&self.params)
            .map_err(|e| UwsError::Format(e.to_string()))?;
        std::fs::write(dir.join("generator.json"), params).map_err(|e| UwsError::io(dir, e))?;
        let path = dir.join("manifest.json");
        save_manifest(&manifest, &path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticSpec::new(2, 3, &["01", "10"], 1, 7);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.gold_words, b.gold_words);
        assert_eq!(a.manifest, b.manifest);
    }

    #[test]
    fn degenerate_distribution_uses_first_word() {
        let mut spec = SyntheticSpec::new(2, 2, &["01", "10"], 20, 3);
        spec.word_dist = vec![1.0, 0.0];
        let c = generate_synthetic(&spec).unwrap();
        for seg in &c.gold_words {
            assert!(seg.word_labels().iter().all(|w| w == "0-1"));
        }
    }

    #[test]
    fn words_concatenate_to_units_and_align_with_frames() {
        let mut spec = SyntheticSpec::new(4, 3, &["01", "123", "30", "2"], 30, 11);
        spec.silence_prob = 0.4;
        let c = generate_synthetic(&spec).unwrap();
        for ((seg, units), (labels, utt)) in c
            .gold_words
            .iter()
            .zip(&c.gold_units)
            .zip(c.frame_labels.iter().zip(&c.manifest.utterances))
        {
            assert_eq!(&seg.units(), units);
            let hop = 0.01;
            for t in &units.tokens {
                let s = (t.start / hop).round() as usize;
                let e = (t.end / hop).round() as usize;
                assert!(labels[s..e].iter().all(|l| *l == t.label));
            }
            for s in &utt.silences {
                let a = (s.start / hop).round() as usize;
                let b = (s.end / hop).round() as usize;
                assert!(labels[a..b].iter().all(|l| l == SIL));
            }
            assert_eq!(
                labels.len(),
                c.features
                    .iter()
                    .find(|f| f.utterance_id == utt.id)
                    .unwrap()
                    .n_frames()
            );
        }
    }

    #[test]
    fn means_are_separated() {
        let (units, sil) = unit_bank(6, 3, 4, 5.0, 1);
        let mut all: Vec<Vec<f64>> = units.iter().flat_map(|u| u.state_means.clone()).collect();
        all.push(sil);
        for i in 0..all.len() {
            for j in 0..i {
                assert!(crate::mathx::squared_distance(&all[i], &all[j]).sqrt() >= 5.0);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SyntheticSpec::new(2, 2, &["01", "12"], 1, 1);
        assert!(spec.validate().is_err());
        spec.lexicon = vec!["01".into(), "10".into()];
        spec.word_dist = vec![0.5, 0.6];
        assert!(spec.validate().is_err());
        assert!(parse_word("", 3).is_err());
        assert_eq!(parse_word("10-2", 11).unwrap(), vec![10, 2]);
    }
}
