//! Word segmentation from soft alignments between unit tokens and the words
//! of a translation.
//!
//! Each unit token is assigned the translation word its alignment row peaks
//! at; maximal runs of tokens with the same peak become words.
//!
//! Alignment files hold blocks of the form
//!
//! ```text
//! <id> <rows> <cols>
//! p_11 p_12 ...
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UwsError};
use crate::mathx::argmax;
use crate::seq::{Segmentation, UnitSequence};

/// Rows whose sum is off by more than this are rejected on load.
pub const LOAD_TOLERANCE: f64 = 1e-3;
const STOCHASTIC_TOLERANCE: f64 = 1e-6;

/// Row-stochastic `rows x cols` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    pub utterance_id: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl AlignmentMatrix {
    pub fn new(
        utterance_id: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let m = AlignmentMatrix {
            utterance_id: utterance_id.into(),
            rows,
            cols,
            data,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_rows(utterance_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let id = utterance_id.into();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(UwsError::dim(
                Some(&id),
                "alignment rows have different lengths",
            ));
        }
        AlignmentMatrix::new(id, rows.len(), cols, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn validate(&self) -> Result<()> {
        let id = Some(self.utterance_id.as_str());
        if self.cols == 0 {
            return Err(UwsError::dim(id, "alignment has no target words"));
        }
        if self.data.len() != self.rows * self.cols {
            return Err(UwsError::dim(
                id,
                format!(
                    "{} entries for a {}x{} alignment",
                    self.data.len(),
                    self.rows,
                    self.cols
                ),
            ));
        }
        for i in 0..self.rows {
            let r = self.row(i);
            if r.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(UwsError::invalid(
                    format!("alignment {}", self.utterance_id),
                    format!("row {i} has a negative or non-finite entry"),
                ));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > STOCHASTIC_TOLERANCE {
                return Err(UwsError::invalid(
                    format!("alignment {}", self.utterance_id),
                    format!("row {i} sums to {s}"),
                ));
            }
        }
        Ok(())
    }

    /// Peak target word of every row, lowest index on ties.
    pub fn peaks(&self) -> Vec<usize> {
        (0..self.rows).map(|i| argmax(self.row(i))).collect()
    }
}

/// Groups maximal runs of tokens that peak at the same target word.
pub fn segment_from_alignment(units: &UnitSequence, m: &AlignmentMatrix) -> Result<Segmentation> {
    if units.utterance_id != m.utterance_id {
        return Err(UwsError::invalid(
            "alignment",
            format!(
                "matrix for {} given with units of {}",
                m.utterance_id, units.utterance_id
            ),
        ));
    }
    if units.len() != m.rows {
        return Err(UwsError::dim(
            Some(&units.utterance_id),
            format!("{} unit tokens but {} alignment rows", units.len(), m.rows),
        ));
    }
    let peaks = m.peaks();
    let flags: Vec<bool> = peaks.windows(2).map(|w| w[0] != w[1]).collect();
    Ok(Segmentation::from_boundaries(units, &flags))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> UwsError {
    UwsError::parse(format!("{}:{line}", path.display()), msg)
}

/// Reads an alignment file, renormalizing rows within [`LOAD_TOLERANCE`] of
/// stochastic.
pub fn load_alignments(path: impl AsRef<Path>) -> Result<Vec<AlignmentMatrix>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| UwsError::io(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut out = Vec::new();
    while let Some((no, header)) = lines.next() {
        let parts: Vec<&str> = header.split_whitespace().collect();
        let [id, rows, cols] = parts[..] else {
            return Err(parse_err(path, no, "expected '<id> <rows> <cols>'"));
        };
        let rows: usize = rows
            .parse()
            .map_err(|_| parse_err(path, no, "bad row count"))?;
        let cols: usize = cols
            .parse()
            .map_err(|_| parse_err(path, no, "bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let (no, line) = lines.next().ok_or_else(|| {
                parse_err(path, no, format!("{id}: expected {rows} rows, found {r}"))
            })?;
            let vals = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|_| parse_err(path, no, format!("{id}: malformed row")))?;
            if vals.len() != cols {
                return Err(parse_err(
                    path,
                    no,
                    format!("{id}: {} values, expected {cols}", vals.len()),
                ));
            }
            let s: f64 = vals.iter().sum();
            if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(parse_err(
                    path,
                    no,
                    format!("{id}: negative or non-finite probability"),
                ));
            }
            if (s - 1.0).abs() > LOAD_TOLERANCE {
                return Err(parse_err(path, no, format!("{id}: row sums to {s}")));
            }
            data.extend(vals.iter().map(|v| v / s));
        }
        out.push(AlignmentMatrix::new(id, rows, cols, data)?);
    }
    Ok(out)
}

pub fn format_alignments(mats: &[AlignmentMatrix]) -> String {
    let mut s = String::new();
    for m in mats {
        let _ = writeln!(s, "{} {} {}", m.utterance_id, m.rows, m.cols);
        for i in 0..m.rows {
            let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
    }
    s
}

pub fn write_alignments(mats: &[AlignmentMatrix], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_alignments(mats)).map_err(|e| UwsError::io(path, e))
}

/// Element-wise mean of matrices for the same utterance, rows renormalized.
pub fn average_alignments(mats: &[AlignmentMatrix]) -> Result<AlignmentMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| UwsError::invalid("alignment average", "no matrices"))?;
    let mut data = vec![0.0; first.data.len()];
    for m in mats {
        if m.utterance_id != first.utterance_id || m.rows != first.rows || m.cols != first.cols {
            return Err(UwsError::dim(
                Some(&first.utterance_id),
                format!(
                    "cannot average with {} ({}x{})",
                    m.utterance_id, m.rows, m.cols
                ),
            ));
        }
        for (a, b) in data.iter_mut().zip(&m.data) {
            *a += b;
        }
    }
    for r in data.chunks_mut(first.cols) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    AlignmentMatrix::new(first.utterance_id.clone(), first.rows, first.cols, data)
}

/// Synthetic alignment of `units` against a translation of `cols` words.
/// A token belongs to the gold word containing its midpoint (or the nearest
/// one); tokens of the `k`-th gold word put mass `1 - noise` on target word
/// `min(k, cols - 1)` and spread `noise` over all target words with weights
/// drawn uniformly from the simplex.
pub fn oracle_alignment_over(
    units: &UnitSequence,
    gold: &Segmentation,
    cols: usize,
    noise: f64,
    seed: u64,
) -> Result<AlignmentMatrix> {
    if !(0.0..1.0).contains(&noise) {
        return Err(UwsError::invalid(
            "oracle alignment",
            format!("noise {noise} outside [0, 1)"),
        ));
    }
    if cols == 0 {
        return Err(UwsError::dim(
            Some(&units.utterance_id),
            "translation is empty",
        ));
    }
    let words: Vec<_> = gold.words.iter().filter(|w| !w.is_silence()).collect();
    if words.is_empty() && !units.is_empty() {
        return Err(UwsError::invalid(
            format!("gold words of {}", gold.utterance_id),
            "no words",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(units.len() * cols);
    for t in &units.tokens {
        let mid = t.midpoint();
        let dist = |k: usize| {
            let w = words[k];
            if mid < w.start() {
                w.start() - mid
            } else if mid > w.end() {
                mid - w.end()
            } else {
                0.0
            }
        };
        let k = (0..words.len())
            .min_by(|a, b| dist(*a).total_cmp(&dist(*b)))
            .unwrap_or(0);
        let peak = k.min(cols - 1);
        let spread: Vec<f64> = (0..cols).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = spread.iter().sum();
        for (j, s) in spread.iter().enumerate() {
            data.push(noise * s / total + if j == peak { 1.0 - noise } else { 0.0 });
        }
    }
    let mut m = AlignmentMatrix {
        utterance_id: units.utterance_id.clone(),
        rows: units.len(),
        cols,
        data,
    };
    for r in m.data.chunks_mut(cols) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    m.validate()?;
    Ok(m)
}

/// Synthetic alignment of the gold unit tokens themselves.
pub fn oracle_alignment(
    gold: &Segmentation,
    cols: usize,
    noise: f64,
    seed: u64,
) -> Result<AlignmentMatrix> {
    oracle_alignment_over(&gold.units(), gold, cols, noise, seed)
}
