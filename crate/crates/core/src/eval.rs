//! Segmentation scoring: boundary precision/recall/F with a matching
//! tolerance, token and type scores, and the type-token ratio.
//!
//! Boundaries can be compared in two planes. In the time plane they are
//! seconds obtained with [`project_boundaries`]; in the symbolic plane they
//! are token indices from [`symbolic_boundaries`], scored with tolerance 0.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UwsError};
use crate::seq::{Segmentation, Word};

pub const DEFAULT_TOLERANCE_S: f64 = 0.02;

const EPS: f64 = 1e-9;

/// Internal word-boundary times of a segmentation.
///
/// Between two adjacent words the boundary is the end of the first. A gap
/// before the second word adds its start as well. Silence pseudo-words
/// contribute their own edges, and leading or trailing silences count as
/// utterance edges.
pub fn project_boundaries(seg: &Segmentation) -> Vec<f64> {
    let words: &[Word] = {
        let w = &seg.words[..];
        let first = w.iter().position(|x| !x.is_silence()).unwrap_or(w.len());
        let last = w
            .iter()
            .rposition(|x| !x.is_silence())
            .map_or(first, |i| i + 1);
        &w[first..last.max(first)]
    };
    let mut out = Vec::new();
    for pair in words.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.is_silence() {
            out.push(b.start());
        } else if a.is_silence() {
            out.push(a.end());
        } else {
            out.push(a.end());
            if b.start() > a.end() + EPS {
                out.push(b.start());
            }
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() <= EPS);
    out
}

/// Token counts before each internal boundary.
pub fn symbolic_boundaries(seg: &Segmentation) -> Vec<f64> {
    let mut out = Vec::new();
    let mut pos = 0;
    for w in &seg.words[..seg.words.len().saturating_sub(1)] {
        pos += w.units.len();
        out.push(pos as f64);
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub hits: usize,
    pub hyp: usize,
    pub gold: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.hits, self.hyp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.hits, self.gold)
    }

    /// Harmonic mean of precision and recall, as one division of counts.
    pub fn fscore(&self) -> f64 {
        ratio(2 * self.hits, self.hyp + self.gold)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceCounts {
    pub id: String,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub hits: usize,
    pub hyp: usize,
    pub gold: usize,
    pub per_utterance: Vec<UtteranceCounts>,
}

impl BoundaryReport {
    fn from_counts(per_utterance: Vec<UtteranceCounts>) -> Self {
        let mut total = Counts::default();
        for u in &per_utterance {
            total.hits += u.counts.hits;
            total.hyp += u.counts.hyp;
            total.gold += u.counts.gold;
        }
        BoundaryReport {
            precision: total.precision(),
            recall: total.recall(),
            fscore: total.fscore(),
            hits: total.hits,
            hyp: total.hyp,
            gold: total.gold,
            per_utterance,
        }
    }
}

fn check_sorted(v: &[f64], what: &str, utt: usize) -> Result<()> {
    if v.windows(2).any(|w| !(w[0] <= w[1])) || v.iter().any(|x| !x.is_finite()) {
        return Err(UwsError::invalid(
            format!("{what} boundaries of utterance {utt}"),
            "not sorted or not finite",
        ));
    }
    Ok(())
}

/// Greedy one-to-one matching of two sorted lists within `tolerance`.
pub fn match_boundaries(hyp: &[f64], gold: &[f64], tolerance: f64) -> Counts {
    let (mut i, mut j, mut hits) = (0, 0, 0);
    while i < hyp.len() && j < gold.len() {
        if (hyp[i] - gold[j]).abs() <= tolerance + EPS {
            hits += 1;
            i += 1;
            j += 1;
        } else if hyp[i] < gold[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    Counts {
        hits,
        hyp: hyp.len(),
        gold: gold.len(),
    }
}

/// Micro-averaged boundary scores over utterances given as parallel lists.
pub fn boundary_score(
    hyp: &[Vec<f64>],
    gold: &[Vec<f64>],
    tolerance: f64,
) -> Result<BoundaryReport> {
    if hyp.len() != gold.len() {
        return Err(UwsError::dim(
            None,
            format!("{} hypothesis vs {} gold utterances", hyp.len(), gold.len()),
        ));
    }
    if !(tolerance >= 0.0) {
        return Err(UwsError::invalid(
            "tolerance",
            format!("{tolerance} is negative"),
        ));
    }
    let mut per = Vec::with_capacity(hyp.len());
    for (u, (h, g)) in hyp.iter().zip(gold).enumerate() {
        check_sorted(h, "hypothesis", u)?;
        check_sorted(g, "gold", u)?;
        per.push(UtteranceCounts {
            id: u.to_string(),
            counts: match_boundaries(h, g, tolerance),
        });
    }
    Ok(BoundaryReport::from_counts(per))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeReport {
    pub token_precision: f64,
    pub token_recall: f64,
    pub token_fscore: f64,
    pub type_precision: f64,
    pub type_recall: f64,
    pub type_fscore: f64,
    /// Distinct hypothesis words over hypothesis tokens.
    pub type_token_ratio: f64,
    pub gold_type_token_ratio: f64,
    pub hyp_tokens: usize,
    pub hyp_types: usize,
    pub gold_tokens: usize,
    pub gold_types: usize,
}

fn word_key(w: &Word) -> (String, i64, i64) {
    let q = |t: f64| (t * 1e6).round() as i64;
    (w.label(), q(w.start()), q(w.end()))
}

fn pair_by_id<'a>(
    hyp: &'a [Segmentation],
    gold: &'a [Segmentation],
) -> Result<Vec<(&'a Segmentation, &'a Segmentation)>> {
    let by_id: BTreeMap<&str, &Segmentation> =
        gold.iter().map(|s| (s.utterance_id.as_str(), s)).collect();
    if by_id.len() != gold.len() {
        return Err(UwsError::invalid(
            "gold segmentations",
            "duplicate utterance ids",
        ));
    }
    if hyp.len() != gold.len() {
        return Err(UwsError::invalid(
            "segmentations",
            format!("{} hypothesis vs {} gold utterances", hyp.len(), gold.len()),
        ));
    }
    let mut seen = BTreeSet::new();
    hyp.iter()
        .map(|h| {
            if !seen.insert(h.utterance_id.as_str()) {
                return Err(UwsError::invalid(
                    "hypothesis segmentations",
                    format!("duplicate id {}", h.utterance_id),
                ));
            }
            by_id
                .get(h.utterance_id.as_str())
                .map(|g| (h, *g))
                .ok_or_else(|| {
                    UwsError::invalid(
                        "segmentations",
                        format!("no gold for utterance {}", h.utterance_id),
                    )
                })
        })
        .collect()
}

/// Token hits require the same word over the same span; types are compared
/// as sets of word labels. Silence pseudo-words are ignored.
pub fn token_type_score(hyp: &[Segmentation], gold: &[Segmentation]) -> Result<TypeReport> {
    let pairs = pair_by_id(hyp, gold)?;
    let mut tokens = Counts::default();
    let mut hyp_types = BTreeSet::new();
    let mut gold_types = BTreeSet::new();
    for (h, g) in pairs {
        let gold_words: BTreeSet<_> = g
            .words
            .iter()
            .filter(|w| !w.is_silence())
            .map(word_key)
            .collect();
        for w in h.words.iter().filter(|w| !w.is_silence()) {
            tokens.hyp += 1;
            tokens.hits += gold_words.contains(&word_key(w)) as usize;
            hyp_types.insert(w.label());
        }
        for w in g.words.iter().filter(|w| !w.is_silence()) {
            tokens.gold += 1;
            gold_types.insert(w.label());
        }
    }
    let types = Counts {
        hits: hyp_types.intersection(&gold_types).count(),
        hyp: hyp_types.len(),
        gold: gold_types.len(),
    };
    Ok(TypeReport {
        token_precision: tokens.precision(),
        token_recall: tokens.recall(),
        token_fscore: tokens.fscore(),
        type_precision: types.precision(),
        type_recall: types.recall(),
        type_fscore: types.fscore(),
        type_token_ratio: ratio(types.hyp, tokens.hyp),
        gold_type_token_ratio: ratio(types.gold, tokens.gold),
        hyp_tokens: tokens.hyp,
        hyp_types: types.hyp,
        gold_tokens: tokens.gold,
        gold_types: types.gold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    #[default]
    Time,
    Symbolic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub plane: Plane,
    pub tolerance_s: f64,
    pub boundary: BoundaryReport,
    pub types: TypeReport,
}

/// Scores hypothesis against gold segmentations, pairing utterances by id.
pub fn evaluate(
    hyp: &[Segmentation],
    gold: &[Segmentation],
    plane: Plane,
    tolerance_s: f64,
) -> Result<EvalReport> {
    let pairs = pair_by_id(hyp, gold)?;
    let project = |s: &Segmentation| match plane {
        Plane::Time => project_boundaries(s),
        Plane::Symbolic => symbolic_boundaries(s),
    };
    let tol = if plane == Plane::Symbolic {
        0.0
    } else {
        tolerance_s
    };
    let h: Vec<Vec<f64>> = pairs.iter().map(|(h, _)| project(h)).collect();
    let g: Vec<Vec<f64>> = pairs.iter().map(|(_, g)| project(g)).collect();
    let mut boundary = boundary_score(&h, &g, tol)?;
    for (u, (hs, _)) in boundary.per_utterance.iter_mut().zip(&pairs) {
        u.id = hs.utterance_id.clone();
    }
    Ok(EvalReport {
        plane,
        tolerance_s: tol,
        boundary,
        types: token_type_score(hyp, gold)?,
    })
}
