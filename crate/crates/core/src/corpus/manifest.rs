use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UwsError};

/// Closed time interval in seconds, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Interval { start, end }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Interval::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.start, i.end]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<Vec<String>>,
    #[serde(default)]
    pub silences: Vec<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_units_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_words_path: Option<PathBuf>,
}

impl Utterance {
    pub fn new(id: impl Into<String>) -> Self {
        Utterance {
            id: id.into(),
            audio_path: None,
            feature_path: None,
            translation: None,
            silences: Vec::new(),
            gold_units_path: None,
            gold_words_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() || self.id.chars().any(char::is_whitespace) {
            return Err(UwsError::invalid(
                "utterance",
                format!("id {:?} is empty or contains whitespace", self.id),
            ));
        }
        let mut prev_end = f64::NEG_INFINITY;
        for s in &self.silences {
            if !(s.start.is_finite() && s.end.is_finite()) || s.start < 0.0 || s.end <= s.start {
                return Err(UwsError::invalid(
                    format!("utterance {}", self.id),
                    format!("bad silence interval [{}, {}]", s.start, s.end),
                ));
            }
            if s.start < prev_end {
                return Err(UwsError::invalid(
                    format!("utterance {}", self.id),
                    "silence intervals overlap or are unsorted",
                ));
            }
            prev_end = s.end;
        }
        Ok(())
    }

    /// Checks that every silence lies within `[0, duration_s]`.
    pub fn validate_duration(&self, duration_s: f64) -> Result<()> {
        if let Some(s) = self.silences.iter().find(|s| s.end > duration_s + 1e-6) {
            return Err(UwsError::invalid(
                format!("utterance {}", self.id),
                format!(
                    "silence [{}, {}] exceeds duration {duration_s}",
                    s.start, s.end
                ),
            ));
        }
        Ok(())
    }

    pub fn in_silence(&self, t: f64) -> bool {
        self.silences.iter().any(|s| s.contains(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub name: String,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_hz: f64,
    #[serde(default)]
    pub utterances: Vec<Utterance>,
}

fn default_frame_rate() -> f64 {
    100.0
}

impl CorpusManifest {
    pub fn new(name: impl Into<String>) -> Self {
        CorpusManifest {
            name: name.into(),
            frame_rate_hz: default_frame_rate(),
            utterances: Vec::new(),
        }
    }

    pub fn hop_s(&self) -> f64 {
        1.0 / self.frame_rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            return Err(UwsError::invalid(
                "manifest",
                format!("frame_rate_hz must be > 0, got {}", self.frame_rate_hz),
            ));
        }
        let mut seen = HashSet::new();
        for u in &self.utterances {
            u.validate()?;
            if !seen.insert(u.id.as_str()) {
                return Err(UwsError::invalid(
                    "manifest",
                    format!("duplicate utterance id {:?}", u.id),
                ));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Resolves relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        for u in &mut self.utterances {
            fix(&mut u.audio_path);
            fix(&mut u.feature_path);
            fix(&mut u.gold_units_path);
            fix(&mut u.gold_words_path);
        }
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| UwsError::io(path, e))?;
    let mut manifest: CorpusManifest = serde_json::from_str(&text)
        .map_err(|e| UwsError::parse(path.display().to_string(), e.to_string()))?;
    manifest.validate()?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    manifest.resolve_paths(base);
    Ok(manifest)
}

pub fn save_manifest(manifest: &CorpusManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate()?;
    let text =
        serde_json::to_string_pretty(manifest).map_err(|e| UwsError::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| UwsError::io(path, e))
}
