use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, UwsError};

pub const FEATURE_MAGIC: &[u8; 4] = b"UWSF";

/// Per-utterance feature matrix, row-major `n_frames x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub utterance_id: String,
    pub dim: usize,
    pub frames: Vec<f64>,
    pub hop_s: f64,
}

impl FrameSequence {
    pub fn new(
        utterance_id: impl Into<String>,
        dim: usize,
        frames: Vec<f64>,
        hop_s: f64,
    ) -> Result<Self> {
        let seq = FrameSequence {
            utterance_id: utterance_id.into(),
            dim,
            frames,
            hop_s,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn from_rows(
        utterance_id: impl Into<String>,
        rows: &[Vec<f64>],
        hop_s: f64,
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(UwsError::dim(None, "ragged rows"));
        }
        FrameSequence::new(utterance_id, dim, rows.concat(), hop_s)
    }

    pub fn n_frames(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.frames.len() / self.dim
        }
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.frames[n * self.dim..(n + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.frames.chunks_exact(self.dim)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames() as f64 * self.hop_s
    }

    /// Start time of frame `n`.
    pub fn frame_start(&self, n: usize) -> f64 {
        n as f64 * self.hop_s
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = Some(self.utterance_id.as_str());
        if self.dim == 0 {
            return Err(UwsError::dim(ctx, "feature dim must be >= 1"));
        }
        if self.frames.is_empty() || self.frames.len() % self.dim != 0 {
            return Err(UwsError::dim(
                ctx,
                format!(
                    "{} values do not form >= 1 rows of width {}",
                    self.frames.len(),
                    self.dim
                ),
            ));
        }
        if let Some(i) = self.frames.iter().position(|v| !v.is_finite()) {
            return Err(UwsError::Numerical(format!(
                "non-finite feature value at frame {} of {}",
                i / self.dim,
                self.utterance_id
            )));
        }
        if !(self.hop_s > 0.0) {
            return Err(UwsError::invalid("frame sequence", "hop must be positive"));
        }
        Ok(())
    }
}

/// Writes `"UWSF"`, u32 rows, u32 cols, then f32 row-major values, little-endian.
pub fn write_features(seq: &FrameSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    seq.validate()?;
    let rows =
        u32::try_from(seq.n_frames()).map_err(|_| UwsError::Format("too many rows".into()))?;
    let cols = u32::try_from(seq.dim).map_err(|_| UwsError::Format("too many cols".into()))?;
    let mut buf = Vec::with_capacity(12 + 4 * seq.frames.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for v in &seq.frames {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| UwsError::io(path, e))?;
    f.write_all(&buf).map_err(|e| UwsError::io(path, e))
}

/// Reads a feature file. The utterance id is taken from the file stem.
pub fn read_features(path: impl AsRef<Path>, hop_s: f64) -> Result<FrameSequence> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| UwsError::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_features(&bytes, id, hop_s)
}

pub(crate) fn decode_features(bytes: &[u8], id: String, hop_s: f64) -> Result<FrameSequence> {
    if bytes.len() < 12 || &bytes[0..4] != FEATURE_MAGIC {
        return Err(UwsError::Format(format!("{id}: bad magic, expected UWSF")));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| UwsError::Format(format!("{id}: header overflow")))?;
    let payload = &bytes[12..];
    if payload.len() != expected {
        return Err(UwsError::Format(format!(
            "{id}: truncated payload, header says {rows}x{cols} ({expected} bytes), found {}",
            payload.len()
        )));
    }
    let frames: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if frames.iter().any(|v| v.is_nan()) {
        return Err(UwsError::Format(format!("{id}: NaN in payload")));
    }
    FrameSequence::new(id, cols, frames, hop_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_3x2() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.uwsf");
        let seq = FrameSequence::from_rows(
            "a",
            &[vec![1.0, -2.5], vec![0.0, 3.25], vec![1e-3f32 as f64, 7.0]],
            0.01,
        )
        .unwrap();
        write_features(&seq, &p).unwrap();
        assert_eq!(read_features(&p, 0.01).unwrap(), seq);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"UWSF");
        assert_eq!(bytes.len(), 12 + 3 * 2 * 4);
    }

    #[test]
    fn wrong_magic_rejected() {
        let err =
            decode_features(b"UWSX\x01\0\0\0\x01\0\0\0\0\0\0\0", "x".into(), 0.01).unwrap_err();
        assert!(matches!(err, UwsError::Format(_)));
    }

    #[test]
    fn truncated_and_nan_rejected() {
        let mut b = b"UWSF\x02\0\0\0\x01\0\0\0".to_vec();
        b.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(decode_features(&b, "x".into(), 0.01).is_err());
        b.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_features(&b, "x".into(), 0.01).is_err());
    }

    #[test]
    fn zero_frames_rejected_on_write() {
        let seq = FrameSequence {
            utterance_id: "z".into(),
            dim: 2,
            frames: vec![],
            hop_s: 0.01,
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(write_features(&seq, dir.path().join("z.uwsf")).is_err());
    }

    proptest! {
        #[test]
        fn f32_values_round_trip_bit_exact(vals in prop::collection::vec(-1e6f32..1e6f32, 1..40), dim in 1usize..4) {
            let n = vals.len() / dim;
            prop_assume!(n >= 1);
            let frames: Vec<f64> = vals[..n * dim].iter().map(|v| *v as f64).collect();
            let seq = FrameSequence::new("p", dim, frames, 0.01).unwrap();
            let mut bytes = Vec::new();
            bytes.extend_from_slice(FEATURE_MAGIC);
            bytes.extend_from_slice(&(n as u32).to_le_bytes());
            bytes.extend_from_slice(&(dim as u32).to_le_bytes());
            for v in &seq.frames { bytes.extend_from_slice(&(*v as f32).to_le_bytes()); }
            let back = decode_features(&bytes, "p".into(), 0.01).unwrap();
            prop_assert_eq!(back, seq);
        }
    }
}
