//! Post-processing of discretizer output: run-length merging of frame labels,
//! silence removal and reintroduction, BPE and corpus statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Interval;
use crate::error::{Result, UwsError};
use crate::seq::{check_label, Segmentation, UnitSequence, UnitToken, Variant, Word};

/// Default limit above which sequences are flagged as too long to segment.
pub const DEFAULT_MAX_LEN: usize = 350;

/// Separator between the constituents of a merged BPE label.
pub const BPE_JOIN: char = '+';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PostMode {
    #[default]
    Raw,
    PlusSil,
}

impl std::str::FromStr for PostMode {
    type Err = UwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(PostMode::Raw),
            "plus_sil" | "plus-sil" | "+sil" => Ok(PostMode::PlusSil),
            other => Err(UwsError::Config(format!(
                "unknown post-processing mode {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for PostMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PostMode::Raw => "raw",
            PostMode::PlusSil => "plus_sil",
        })
    }
}

/// Run-length encodes per-frame labels into time-stamped tokens.
pub fn merge_windows<S: AsRef<str>>(
    utterance_id: &str,
    labels: &[S],
    hop_s: f64,
) -> Result<UnitSequence> {
    if labels.is_empty() {
        return Err(UwsError::invalid(
            format!("frame labels of {utterance_id}"),
            "no frames",
        ));
    }
    if !(hop_s > 0.0) {
        return Err(UwsError::invalid("hop", format!("{hop_s} is not positive")));
    }
    let mut tokens: Vec<UnitToken> = Vec::new();
    let mut run_start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t].as_ref() != labels[run_start].as_ref() {
            let label = labels[run_start].as_ref();
            check_label(label)?;
            tokens.push(UnitToken::new(
                label,
                run_start as f64 * hop_s,
                t as f64 * hop_s,
            ));
            run_start = t;
        }
    }
    Ok(UnitSequence::new(utterance_id, tokens))
}

/// Inverse of [`merge_windows`] for frame-aligned tokens.
pub fn expand_to_frames(seq: &UnitSequence, hop_s: f64) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for t in &seq.tokens {
        let a = t.start / hop_s;
        let b = t.end / hop_s;
        if (a - a.round()).abs() > 1e-6 || (b - b.round()).abs() > 1e-6 || b.round() <= a.round() {
            return Err(UwsError::invalid(
                format!("unit sequence {}", seq.utterance_id),
                format!(
                    "token {} [{}, {}] is not frame aligned",
                    t.label, t.start, t.end
                ),
            ));
        }
        if a.round() as usize != out.len() {
            return Err(UwsError::invalid(
                format!("unit sequence {}", seq.utterance_id),
                "tokens do not tile the frames",
            ));
        }
        out.extend(std::iter::repeat_n(
            t.label.clone(),
            (b.round() - a.round()) as usize,
        ));
    }
    Ok(out)
}

/// A +SIL sequence and the positions (in the input) of the dropped tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SilenceRemoval {
    pub sequence: UnitSequence,
    pub dropped: Vec<usize>,
}

/// Drops every token whose midpoint lies inside an annotated silence.
pub fn remove_silence_units(seq: &UnitSequence, silences: &[Interval]) -> Result<SilenceRemoval> {
    if seq.variant == Variant::PlusSil {
        return Err(UwsError::invalid(
            format!("unit sequence {}", seq.utterance_id),
            "silence units were already removed",
        ));
    }
    let mut tokens = Vec::with_capacity(seq.tokens.len());
    let mut dropped = Vec::new();
    for (i, t) in seq.tokens.iter().enumerate() {
        let mid = t.midpoint();
        if silences.iter().any(|s| s.contains(mid)) {
            dropped.push(i);
        } else {
            tokens.push(t.clone());
        }
    }
    Ok(SilenceRemoval {
        sequence: UnitSequence {
            utterance_id: seq.utterance_id.clone(),
            tokens,
            variant: Variant::PlusSil,
        },
        dropped,
    })
}

/// Strips the discretizer's own silence tokens and, for +SIL, every token in
/// an annotated silence.
pub fn post_process(
    seq: &UnitSequence,
    silences: &[Interval],
    mode: PostMode,
) -> Result<UnitSequence> {
    let stripped = seq.without_silence_tokens();
    match mode {
        PostMode::Raw => Ok(stripped),
        PostMode::PlusSil => Ok(remove_silence_units(&stripped, silences)?.sequence),
    }
}

/// Puts the annotated silences back into a segmentation of a +SIL sequence
/// as silence pseudo-words, splitting any word that spans a silence. A
/// silence is clipped to the gap left by its neighbouring tokens.
pub fn reintroduce_silence(seg: &Segmentation, silences: &[Interval]) -> Result<Segmentation> {
    let ctx = || format!("segmentation {}", seg.utterance_id);
    for w in &seg.words {
        if w.units.is_empty() {
            return Err(UwsError::invalid(ctx(), "empty word"));
        }
        for u in &w.units {
            if silences.iter().any(|s| s.contains(u.midpoint())) {
                return Err(UwsError::invalid(
                    ctx(),
                    format!("token {} at {:.3} lies inside a silence", u.label, u.start),
                ));
            }
        }
    }
    let mut sil: Vec<&Interval> = silences.iter().collect();
    sil.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut next_sil = 0;
    let mut words: Vec<Word> = Vec::new();
    let mut current: Vec<UnitToken> = Vec::new();
    let mut prev_end = f64::NEG_INFINITY;
    for w in &seg.words {
        for u in &w.units {
            while next_sil < sil.len() && sil[next_sil].midpoint() < u.midpoint() {
                if !current.is_empty() {
                    words.push(Word::new(std::mem::take(&mut current)));
                }
                let (start, end) = (
                    sil[next_sil].start.max(prev_end),
                    sil[next_sil].end.min(u.start),
                );
                if start < end {
                    words.push(Word::silence(start, end));
                }
                next_sil += 1;
            }
            current.push(u.clone());
            prev_end = u.end;
        }
        words.push(Word::new(std::mem::take(&mut current)));
    }
    for s in &sil[next_sil..] {
        let start = s.start.max(prev_end);
        if start < s.end {
            words.push(Word::silence(start, s.end));
        }
    }
    Ok(Segmentation::new(seg.utterance_id.clone(), words))
}

/// Ordered merge list learned by greedy most-frequent-pair merging.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeModel {
    pub alphabet: Vec<String>,
    pub merges: Vec<(String, String)>,
    pub vocab_size: usize,
}

impl BpeModel {
    pub fn merged_label(left: &str, right: &str) -> String {
        format!("{left}{BPE_JOIN}{right}")
    }

    /// Base labels making up a (possibly merged) label.
    pub fn constituents(label: &str) -> impl Iterator<Item = &str> {
        label.split(BPE_JOIN)
    }
}

fn apply_merge(tokens: &mut Vec<UnitToken>, left: &str, right: &str, merged: &str) {
    let mut out: Vec<UnitToken> = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if i + 1 < tokens.len() && tokens[i].label == left && tokens[i + 1].label == right {
            out.push(UnitToken::new(merged, tokens[i].start, tokens[i + 1].end));
            i += 2;
        } else {
            out.push(tokens[i].clone());
            i += 1;
        }
    }
    *tokens = out;
}

/// Learns merges until the vocabulary reaches `target_vocab` or no pair occurs
/// twice. Ties between equally frequent pairs go to the lexicographically
/// smallest pair.
pub fn bpe_learn(corpus: &[UnitSequence], target_vocab: usize) -> Result<BpeModel> {
    if corpus.iter().all(UnitSequence::is_empty) {
        return Err(UwsError::invalid("bpe corpus", "no tokens"));
    }
    let alphabet: BTreeSet<String> = corpus
        .iter()
        .flat_map(|s| s.tokens.iter().map(|t| t.label.clone()))
        .collect();
    if let Some(bad) = alphabet.iter().find(|l| l.contains(BPE_JOIN)) {
        return Err(UwsError::invalid(
            "bpe corpus",
            format!("label {bad:?} contains '{BPE_JOIN}'"),
        ));
    }
    let mut seqs: Vec<Vec<UnitToken>> = corpus.iter().map(|s| s.tokens.clone()).collect();
    let mut merges = Vec::new();
    let mut vocab = alphabet.len();
    while vocab < target_vocab {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts
                    .entry((w[0].label.as_str(), w[1].label.as_str()))
                    .or_default() += 1;
            }
        }
        let Some((&(l, r), &c)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        else {
            break;
        };
        if c < 2 {
            break;
        }
        let (l, r) = (l.to_owned(), r.to_owned());
        let merged = BpeModel::merged_label(&l, &r);
        for s in &mut seqs {
            apply_merge(s, &l, &r, &merged);
        }
        merges.push((l, r));
        vocab += 1;
    }
    Ok(BpeModel {
        alphabet: alphabet.into_iter().collect(),
        merges,
        vocab_size: vocab,
    })
}

pub fn bpe_apply(seq: &UnitSequence, model: &BpeModel) -> Result<UnitSequence> {
    for t in &seq.tokens {
        if model.alphabet.binary_search(&t.label).is_err() {
            return Err(UwsError::invalid(
                format!("unit sequence {}", seq.utterance_id),
                format!("label {:?} is not in the BPE alphabet", t.label),
            ));
        }
    }
    let mut tokens = seq.tokens.clone();
    for (l, r) in &model.merges {
        apply_merge(&mut tokens, l, r, &BpeModel::merged_label(l, r));
    }
    Ok(UnitSequence {
        utterance_id: seq.utterance_id.clone(),
        tokens,
        variant: seq.variant,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitStats {
    pub n_utterances: usize,
    pub n_distinct_units: usize,
    pub total_tokens: usize,
    /// Mean over nonempty sequences.
    pub mean_seq_len: f64,
    pub max_seq_len: usize,
    /// Tokens per second of token-covered time.
    pub units_per_second: f64,
    pub max_len: usize,
    pub over_length: Vec<String>,
    pub empty: Vec<String>,
}

/// Counts over a corpus; sequences longer than `max_len` are flagged.
pub fn unit_stats(corpus: &[UnitSequence], max_len: usize) -> Result<UnitStats> {
    if corpus.is_empty() {
        return Err(UwsError::invalid("unit statistics", "empty corpus"));
    }
    let mut types: HashSet<&str> = HashSet::new();
    let mut total = 0;
    let mut max_seq_len = 0;
    let mut seconds = 0.0;
    let mut over_length = Vec::new();
    let mut empty = Vec::new();
    for s in corpus {
        if s.is_empty() {
            log::warn!(
                "utterance {} has no units and is left out of the mean length",
                s.utterance_id
            );
            empty.push(s.utterance_id.clone());
            continue;
        }
        for t in &s.tokens {
            types.insert(&t.label);
            seconds += t.end - t.start;
        }
        total += s.len();
        max_seq_len = max_seq_len.max(s.len());
        if s.len() > max_len {
            over_length.push(s.utterance_id.clone());
        }
    }
    let nonempty = corpus.len() - empty.len();
    Ok(UnitStats {
        n_utterances: corpus.len(),
        n_distinct_units: types.len(),
        total_tokens: total,
        mean_seq_len: if nonempty == 0 {
            0.0
        } else {
            total as f64 / nonempty as f64
        },
        max_seq_len,
        units_per_second: if seconds > 0.0 {
            total as f64 / seconds
        } else {
            0.0
        },
        max_len,
        over_length,
        empty,
    })
}
