//! Unit token sequences and word segmentations.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UwsError};

/// Label reserved for silence tokens and silence pseudo-words.
pub const SIL: &str = "sil";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitToken {
    pub label: String,
    pub start: f64,
    pub end: f64,
}

impl UnitToken {
    pub fn new(label: impl Into<String>, start: f64, end: f64) -> Self {
        UnitToken {
            label: label.into(),
            start,
            end,
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn is_silence(&self) -> bool {
        self.label == SIL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Variant {
    #[default]
    Raw,
    PlusSil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSequence {
    pub utterance_id: String,
    pub tokens: Vec<UnitToken>,
    pub variant: Variant,
}

impl UnitSequence {
    pub fn new(utterance_id: impl Into<String>, tokens: Vec<UnitToken>) -> Self {
        UnitSequence {
            utterance_id: utterance_id.into(),
            tokens,
            variant: Variant::Raw,
        }
    }

    /// Builds a sequence with symbolic times: token `i` spans `[i, i + 1)`.
    pub fn symbolic<S: AsRef<str>>(utterance_id: impl Into<String>, labels: &[S]) -> Self {
        let tokens = labels
            .iter()
            .enumerate()
            .map(|(i, l)| UnitToken::new(l.as_ref(), i as f64, (i + 1) as f64))
            .collect();
        UnitSequence::new(utterance_id, tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.label.as_str()).collect()
    }

    /// Checks time ordering, positive durations and label syntax.
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = f64::NEG_INFINITY;
        for (i, t) in self.tokens.iter().enumerate() {
            check_label(&t.label)?;
            if !(t.end > t.start) {
                return Err(UwsError::invalid(
                    format!("unit sequence {}", self.utterance_id),
                    format!("token {i} has end {} <= start {}", t.end, t.start),
                ));
            }
            if t.start < prev_end - 1e-9 {
                return Err(UwsError::invalid(
                    format!("unit sequence {}", self.utterance_id),
                    format!("token {i} overlaps its predecessor"),
                ));
            }
            prev_end = t.end;
        }
        Ok(())
    }

    /// Drops tokens labelled as silence.
    pub fn without_silence_tokens(&self) -> UnitSequence {
        UnitSequence {
            utterance_id: self.utterance_id.clone(),
            tokens: self
                .tokens
                .iter()
                .filter(|t| !t.is_silence())
                .cloned()
                .collect(),
            variant: self.variant,
        }
    }
}

/// Labels may not contain whitespace or the separators used by the text formats.
pub fn check_label(label: &str) -> Result<()> {
    if label.is_empty()
        || label
            .chars()
            .any(|c| c.is_whitespace() || c == '-' || c == ':')
    {
        return Err(UwsError::invalid(
            "label",
            format!("{label:?} is empty or contains whitespace, '-' or ':'"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub units: Vec<UnitToken>,
}

impl Word {
    pub fn new(units: Vec<UnitToken>) -> Self {
        debug_assert!(!units.is_empty());
        Word { units }
    }

    pub fn silence(start: f64, end: f64) -> Self {
        Word {
            units: vec![UnitToken::new(SIL, start, end)],
        }
    }

    /// Dash-joined unit labels.
    pub fn label(&self) -> String {
        self.units
            .iter()
            .map(|u| u.label.as_str())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn start(&self) -> f64 {
        self.units[0].start
    }

    pub fn end(&self) -> f64 {
        self.units[self.units.len() - 1].end
    }

    pub fn is_silence(&self) -> bool {
        self.units.len() == 1 && self.units[0].is_silence()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub utterance_id: String,
    pub words: Vec<Word>,
}

impl Segmentation {
    pub fn new(utterance_id: impl Into<String>, words: Vec<Word>) -> Self {
        Segmentation {
            utterance_id: utterance_id.into(),
            words,
        }
    }

    /// Groups `units` into words; `boundaries[i]` is true when a word ends after token `i`.
    /// The final token always closes a word.
    pub fn from_boundaries(units: &UnitSequence, boundaries: &[bool]) -> Self {
        let mut words = Vec::new();
        let mut current = Vec::new();
        for (i, tok) in units.tokens.iter().enumerate() {
            current.push(tok.clone());
            let last = i + 1 == units.tokens.len();
            if last || boundaries.get(i).copied().unwrap_or(false) {
                words.push(Word::new(std::mem::take(&mut current)));
            }
        }
        Segmentation::new(units.utterance_id.clone(), words)
    }

    /// Flattened unit tokens.
    pub fn units(&self) -> UnitSequence {
        UnitSequence::new(
            self.utterance_id.clone(),
            self.words
                .iter()
                .flat_map(|w| w.units.iter().cloned())
                .collect(),
        )
    }

    /// Boundary flags after each token of the flattened sequence, excluding the last.
    pub fn boundary_flags(&self) -> Vec<bool> {
        let mut flags = Vec::new();
        for w in &self.words {
            for _ in 1..w.units.len() {
                flags.push(false);
            }
            flags.push(true);
        }
        flags.pop();
        flags
    }

    pub fn word_labels(&self) -> Vec<String> {
        self.words.iter().map(Word::label).collect()
    }
}
