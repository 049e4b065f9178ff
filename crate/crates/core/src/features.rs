//! MFCC extraction and per-utterance mean/variance normalization.
//!
//! Recipe: pre-emphasis, Hann window, power spectrum, HTK-scale triangular
//! mel filterbank, log with a 1e-10 floor, orthonormal DCT-II, optional
//! delta and delta-delta coefficients.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::FrameSequence;
use crate::error::{Result, UwsError};
use crate::par::Exec;

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub sample_rate_hz: u32,
    pub window_s: f64,
    pub hop_s: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub pre_emphasis: f64,
    /// 0: static only, 1: + deltas, 2: + delta-deltas.
    pub delta_order: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate_hz: 16_000,
            window_s: 0.025,
            hop_s: 0.010,
            n_fft: 512,
            n_mels: 23,
            n_ceps: 13,
            pre_emphasis: 0.97,
            delta_order: 0,
        }
    }
}

impl MfccConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_s * self.sample_rate_hz as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_s * self.sample_rate_hz as f64).round() as usize
    }

    pub fn output_dim(&self) -> usize {
        self.n_ceps * (1 + self.delta_order)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UwsError::invalid("mfcc config", m));
        if self.hop_s > self.window_s || self.hop_samples() == 0 {
            return bad("need 0 < hop <= window");
        }
        if self.n_ceps == 0 || self.n_ceps > self.n_mels {
            return bad("need 1 <= n_ceps <= n_mels");
        }
        if self.n_fft < self.window_samples() {
            return bad("n_fft must cover the window");
        }
        if self.delta_order > 2 {
            return bad("delta_order must be 0, 1 or 2");
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale spanning 0 Hz to Nyquist.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Edge frequencies in Hz, `n_mels + 2` of them.
    pub edges_hz: Vec<f64>,
    /// `n_mels x (n_fft / 2 + 1)` weights.
    pub weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate_hz: u32) -> Self {
        let nyquist = sample_rate_hz as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate_hz as f64 / n_fft as f64;
        let mut fb = MelFilterbank {
            edges_hz,
            weights: Vec::new(),
        };
        fb.weights = (0..n_mels)
            .map(|m| {
                (0..n_bins)
                    .map(|k| fb.response(m, k as f64 * bin_hz))
                    .collect()
            })
            .collect();
        fb
    }

    /// Triangular weight of filter `m` at frequency `hz`.
    pub fn response(&self, m: usize, hz: f64) -> f64 {
        let (lo, c, hi) = (self.edges_hz[m], self.edges_hz[m + 1], self.edges_hz[m + 2]);
        if hz <= lo || hz >= hi {
            0.0
        } else if hz <= c {
            (hz - lo) / (c - lo)
        } else {
            (hi - hz) / (hi - c)
        }
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Reusable MFCC front end for one configuration.
pub struct Mfcc {
    cfg: MfccConfig,
    window: Vec<f64>,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
    dct: Vec<Vec<f64>>,
}

impl std::fmt::Debug for Mfcc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mfcc").field("cfg", &self.cfg).finish()
    }
}

impl Mfcc {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.window_samples();
        let window = (0..w)
            .map(|n| {
                0.5 - 0.5
                    * (2.0 * std::f64::consts::PI * n as f64 / (w as f64 - 1.0).max(1.0)).cos()
            })
            .collect();
        let filterbank = MelFilterbank::new(cfg.n_mels, cfg.n_fft, cfg.sample_rate_hz);
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let m = cfg.n_mels as f64;
        let dct = (0..cfg.n_ceps)
            .map(|k| {
                let scale = if k == 0 {
                    (1.0 / m).sqrt()
                } else {
                    (2.0 / m).sqrt()
                };
                (0..cfg.n_mels)
                    .map(|j| scale * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / m).cos())
                    .collect()
            })
            .collect();
        Ok(Mfcc {
            cfg,
            window,
            filterbank,
            fft,
            dct,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        let w = self.cfg.window_samples();
        if n_samples < w {
            0
        } else {
            (n_samples - w) / self.cfg.hop_samples() + 1
        }
    }

    fn pre_emphasize(&self, samples: &[f64]) -> Vec<f64> {
        let a = self.cfg.pre_emphasis;
        let mut out = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            out.push(if i == 0 { *s } else { s - a * samples[i - 1] });
        }
        out
    }

    /// Mel filterbank energies (before the log) of one windowed frame.
    pub fn mel_energies(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        for (i, (s, w)) in frame.iter().zip(&self.window).enumerate() {
            buf[i] = Complex::new(s * w, 0.0);
        }
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..self.cfg.n_fft / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr())
            .collect();
        self.filterbank.apply(&power)
    }

    /// Static cepstra per frame.
    fn cepstra(&self, samples: &[f64]) -> Vec<Vec<f64>> {
        let signal = self.pre_emphasize(samples);
        let w = self.cfg.window_samples();
        let hop = self.cfg.hop_samples();
        (0..self.n_frames(samples.len()))
            .map(|t| {
                let frame = &signal[t * hop..t * hop + w];
                let logmel: Vec<f64> = self
                    .mel_energies(frame)
                    .into_iter()
                    .map(|e| e.max(LOG_FLOOR).ln())
                    .collect();
                self.dct
                    .iter()
                    .map(|row| row.iter().zip(&logmel).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect()
    }

    pub fn compute(&self, utterance_id: &str, samples: &[f64]) -> Result<FrameSequence> {
        let w = self.cfg.window_samples();
        if samples.len() < w {
            return Err(UwsError::invalid(
                format!("audio {utterance_id}"),
                format!("{} samples is shorter than one window ({w})", samples.len()),
            ));
        }
        let mut rows = self.cepstra(samples);
        if self.cfg.delta_order >= 1 {
            let d1 = deltas(&rows);
            let d2 = if self.cfg.delta_order >= 2 {
                Some(deltas(&d1))
            } else {
                None
            };
            for (t, row) in rows.iter_mut().enumerate() {
                row.extend_from_slice(&d1[t]);
                if let Some(d2) = &d2 {
                    row.extend_from_slice(&d2[t]);
                }
            }
        }
        FrameSequence::from_rows(utterance_id, &rows, self.cfg.hop_s)
    }
}

/// Regression deltas over a +-2 frame window with edge replication.
pub fn deltas(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as isize;
    let denom = 2.0 * (1.0 + 4.0);
    (0..n)
        .map(|t| {
            let at = |k: isize| &rows[k.clamp(0, n - 1) as usize];
            (0..rows[0].len())
                .map(|d| {
                    (1..=2)
                        .map(|k| k as f64 * (at(t + k)[d] - at(t - k)[d]))
                        .sum::<f64>()
                        / denom
                })
                .collect()
        })
        .collect()
}

/// Reads a mono 16-bit PCM WAV, scaled to [-1, 1).
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| UwsError::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(UwsError::Format(format!(
            "{}: unsupported WAV encoding ({} ch, {} bit, {:?}); need mono PCM16",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    if spec.sample_rate != expected_rate {
        return Err(UwsError::Format(format!(
            "{}: sample rate {} differs from configured {expected_rate}",
            path.display(),
            spec.sample_rate
        )));
    }
    reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| UwsError::Format(format!("{}: {e}", path.display())))
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let err = |e: hound::Error| UwsError::Format(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    for s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
            .map_err(err)?;
    }
    w.finalize().map_err(err)
}

pub fn wav_to_frames(
    utterance_id: &str,
    wav_path: impl AsRef<Path>,
    cfg: &MfccConfig,
) -> Result<FrameSequence> {
    let mfcc = Mfcc::new(cfg.clone())?;
    let samples = read_wav(wav_path, cfg.sample_rate_hz)?;
    mfcc.compute(utterance_id, &samples)
}

/// Standardizes every dimension to zero mean and unit variance.
/// Constant dimensions map to zero.
pub fn cmvn(seq: &FrameSequence) -> Result<FrameSequence> {
    let n = seq.n_frames();
    if n < 2 {
        return Err(UwsError::invalid(
            format!("cmvn on {}", seq.utterance_id),
            "need at least 2 frames",
        ));
    }
    let d = seq.dim;
    let mut mean = vec![0.0; d];
    for row in seq.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in seq.rows() {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    let frames = seq
        .rows()
        .flat_map(|row| {
            (0..d)
                .map(|j| {
                    if var[j] <= 1e-12 * (1.0 + mean[j].abs()) {
                        0.0
                    } else {
                        (row[j] - mean[j]) / var[j].sqrt()
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    FrameSequence::new(seq.utterance_id.clone(), d, frames, seq.hop_s)
}

/// MFCC + CMVN for a batch of `(utterance id, wav path)` pairs.
pub fn extract_batch<P: AsRef<Path> + Sync>(
    items: &[(String, P)],
    cfg: &MfccConfig,
    exec: Exec,
) -> Result<Vec<FrameSequence>> {
    let mfcc = Mfcc::new(cfg.clone())?;
    exec.try_map(items, |(id, path)| {
        let samples = read_wav(path, cfg.sample_rate_hz)?;
        cmvn(&mfcc.compute(id, &samples)?)
    })
}

/// MFCC + CMVN over in-memory signals.
pub fn extract_signals(
    items: &[(String, Vec<f64>)],
    cfg: &MfccConfig,
    exec: Exec,
) -> Result<Vec<FrameSequence>> {
    let mfcc = Mfcc::new(cfg.clone())?;
    exec.try_map(items, |(id, s)| cmvn(&mfcc.compute(id, s)?))
}
