//! Frame-wise VQ-VAE.
//!
//! Encoder and decoder are two-layer perceptrons (`affine -> tanh -> affine`).
//! The minimized objective per frame is
//! `|x - dec(e_z)|^2 + k1 |sg(e_z) - v|^2 + k2 |e_z - sg(v)|^2`
//! with `z` the nearest codebook row to the encoder output `v`.
//! Gradients are written out by hand: decoder and codebook receive the exact
//! gradient of this expression (respecting the stop-gradients), the encoder
//! receives the decoder-input gradient copied through the quantizer plus the
//! `k1` commitment gradient.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::textfmt::FrameLabels;
use crate::corpus::FrameSequence;
use crate::error::{Result, UwsError};
use crate::mathx::squared_distance;
use crate::par::Exec;
use crate::persist;

pub const MODEL_MAGIC: &[u8; 4] = b"UWSV";

/// Dense layer, weights row-major `n_out x n_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Affine {
    fn init(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        Affine {
            n_in,
            n_out,
            w: (0..n_in * n_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            b: vec![0.0; n_out],
        }
    }

    fn zeros_like(&self) -> Self {
        Affine {
            n_in: self.n_in,
            n_out: self.n_out,
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| {
                let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
                self.b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad`, returns the input gradient.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Affine) -> Vec<f64> {
        let mut dx = vec![0.0; self.n_in];
        for o in 0..self.n_out {
            grad.b[o] += dy[o];
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            let grow = &mut grad.w[o * self.n_in..(o + 1) * self.n_in];
            for i in 0..self.n_in {
                grow[i] += dy[o] * x[i];
                dx[i] += dy[o] * row[i];
            }
        }
        dx
    }
}

/// `affine -> tanh -> affine`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Affine,
    pub output: Affine,
}

impl Mlp {
    fn init(n_in: usize, n_hidden: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            hidden: Affine::init(n_in, n_hidden, rng),
            output: Affine::init(n_hidden, n_out, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Mlp {
            hidden: self.hidden.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    fn hidden_act(&self, x: &[f64]) -> Vec<f64> {
        self.hidden.forward(x).into_iter().map(f64::tanh).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.output.forward(&self.hidden_act(x))
    }

    fn backward(&self, x: &[f64], h: &[f64], dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let dh = self.output.backward(h, dy, &mut grad.output);
        let da: Vec<f64> = dh.iter().zip(h).map(|(g, t)| g * (1.0 - t * t)).collect();
        self.hidden.backward(x, &da, &mut grad.hidden)
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.hidden.w,
            &mut self.hidden.b,
            &mut self.output.w,
            &mut self.output.b,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqVaeConfig {
    pub units: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub k1: f64,
    pub k2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Relative loss improvement below which an epoch counts as stagnant.
    pub stagnation_threshold: f64,
    /// Consecutive stagnant epochs that halve the learning rate.
    pub stagnation_epochs: usize,
    pub seed: u64,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        VqVaeConfig {
            units: 50,
            latent_dim: 16,
            hidden_dim: 64,
            k1: 2.0,
            k2: 4.0,
            learning_rate: 2e-3,
            epochs: 20,
            batch_size: 256,
            stagnation_threshold: 1e-4,
            stagnation_epochs: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqVaeModel {
    pub encoder: Mlp,
    /// `units x latent_dim`.
    pub codebook: Vec<Vec<f64>>,
    pub decoder: Mlp,
    pub k1: f64,
    pub k2: f64,
}

/// Mean per-frame loss terms (already weighted by k1/k2).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub commitment: f64,
    pub codebook: f64,
    pub n_frames: usize,
}

impl LossBreakdown {
    fn add_frame(&mut self, recon: f64, qerr: f64, k1: f64, k2: f64) {
        self.reconstruction += recon;
        self.commitment += k1 * qerr;
        self.codebook += k2 * qerr;
        self.n_frames += 1;
    }

    fn merge(mut self, other: &LossBreakdown) -> Self {
        self.reconstruction += other.reconstruction;
        self.commitment += other.commitment;
        self.codebook += other.codebook;
        self.n_frames += other.n_frames;
        self
    }

    fn finish(mut self) -> Self {
        let n = self.n_frames.max(1) as f64;
        self.reconstruction /= n;
        self.commitment /= n;
        self.codebook /= n;
        self.total = self.reconstruction + self.commitment + self.codebook;
        self
    }
}

/// Nearest codebook row in Euclidean distance, lowest index on ties.
pub fn quantize_nearest(v: &[f64], codebook: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (u, row) in codebook.iter().enumerate() {
        let d = squared_distance(v, row);
        if d < best_d {
            best = u;
            best_d = d;
        }
    }
    best
}

impl VqVaeModel {
    pub fn new(feature_dim: usize, cfg: &VqVaeConfig, rng: &mut impl Rng) -> Self {
        VqVaeModel {
            encoder: Mlp::init(feature_dim, cfg.hidden_dim, cfg.latent_dim, rng),
            codebook: (0..cfg.units)
                .map(|_| {
                    (0..cfg.latent_dim)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect()
                })
                .collect(),
            decoder: Mlp::init(cfg.latent_dim, cfg.hidden_dim, feature_dim, rng),
            k1: cfg.k1,
            k2: cfg.k2,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.hidden.n_in
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output.n_out
    }

    pub fn units(&self) -> usize {
        self.codebook.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.units() < 2 {
            return Err(UwsError::invalid(
                "vq-vae model",
                "need at least 2 codebook rows",
            ));
        }
        let d = self.latent_dim();
        if self.codebook.iter().any(|r| r.len() != d) || self.decoder.hidden.n_in != d {
            return Err(UwsError::invalid(
                "vq-vae model",
                "codebook/decoder dims disagree with encoder",
            ));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let mut all = vec![
            &self.encoder.hidden.w,
            &self.encoder.hidden.b,
            &self.encoder.output.w,
            &self.encoder.output.b,
            &self.decoder.hidden.w,
            &self.decoder.hidden.b,
            &self.decoder.output.w,
            &self.decoder.output.b,
        ];
        all.extend(self.codebook.iter());
        if !all.iter().all(|v| finite(v)) {
            return Err(UwsError::Numerical("non-finite vq-vae parameter".into()));
        }
        Ok(())
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.encoder.forward(x)
    }

    pub fn decode(&self, q: &[f64]) -> Vec<f64> {
        self.decoder.forward(q)
    }

    pub fn assign(&self, x: &[f64]) -> usize {
        quantize_nearest(&self.encode(x), &self.codebook)
    }

    /// Loss terms for one frame with a given encoder output.
    pub fn frame_terms(&self, x: &[f64], v: &[f64]) -> (usize, f64, f64) {
        let z = quantize_nearest(v, &self.codebook);
        let xhat = self.decode(&self.codebook[z]);
        (
            z,
            squared_distance(x, &xhat),
            squared_distance(&self.codebook[z], v),
        )
    }

    fn breakdown_of(&self, seq: &FrameSequence) -> LossBreakdown {
        let mut acc = LossBreakdown::default();
        for x in seq.rows() {
            let v = self.encode(x);
            let (_, recon, qerr) = self.frame_terms(x, &v);
            acc.add_frame(recon, qerr, self.k1, self.k2);
        }
        acc
    }

    /// Per-frame unit labels.
    pub fn decode_units(&self, seq: &FrameSequence) -> FrameLabels {
        FrameLabels {
            utterance_id: seq.utterance_id.clone(),
            labels: seq.rows().map(|x| self.assign(x).to_string()).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::save(path, MODEL_MAGIC, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: VqVaeModel = persist::load(path, MODEL_MAGIC)?;
        m.validate()?;
        Ok(m)
    }
}

pub fn vqvae_loss(batch: &FrameSequence, model: &VqVaeModel) -> Result<LossBreakdown> {
    if batch.dim != model.feature_dim() {
        return Err(UwsError::dim(
            Some(&batch.utterance_id),
            format!(
                "features have dim {}, model expects {}",
                batch.dim,
                model.feature_dim()
            ),
        ));
    }
    Ok(model.breakdown_of(batch).finish())
}

/// Mean loss over a corpus; per-utterance sums are reduced in input order.
pub fn corpus_loss(
    corpus: &[FrameSequence],
    model: &VqVaeModel,
    exec: Exec,
) -> Result<LossBreakdown> {
    if let Some(bad) = corpus.iter().find(|s| s.dim != model.feature_dim()) {
        return Err(UwsError::dim(
            Some(&bad.utterance_id),
            "feature dim differs from model",
        ));
    }
    let parts = exec.map(corpus, |s| model.breakdown_of(s));
    Ok(parts
        .iter()
        .fold(LossBreakdown::default(), |a, p| a.merge(p))
        .finish())
}

/// Gradients of the mean batch objective.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub encoder: Mlp,
    pub codebook: Vec<Vec<f64>>,
    pub decoder: Mlp,
    pub loss: f64,
}

impl Gradients {
    fn zeros_like(m: &VqVaeModel) -> Self {
        Gradients {
            encoder: m.encoder.zeros_like(),
            codebook: m.codebook.iter().map(|r| vec![0.0; r.len()]).collect(),
            decoder: m.decoder.zeros_like(),
            loss: 0.0,
        }
    }
}

/// Analytic gradients of the mean objective over `frames`.
pub fn gradients(model: &VqVaeModel, frames: &[&[f64]]) -> Gradients {
    let mut g = Gradients::zeros_like(model);
    let scale = 1.0 / frames.len().max(1) as f64;
    for x in frames {
        let h_enc = model.encoder.hidden_act(x);
        let v = model.encoder.output.forward(&h_enc);
        let z = quantize_nearest(&v, &model.codebook);
        let q = &model.codebook[z];
        let h_dec = model.decoder.hidden_act(q);
        let xhat = model.decoder.output.forward(&h_dec);
        let recon = squared_distance(x, &xhat);
        let qerr = squared_distance(q, &v);
        g.loss += scale * (recon + (model.k1 + model.k2) * qerr);

        let dxhat: Vec<f64> = xhat
            .iter()
            .zip(x.iter())
            .map(|(a, b)| 2.0 * scale * (a - b))
            .collect();
        let dq = model.decoder.backward(q, &h_dec, &dxhat, &mut g.decoder);
        for i in 0..q.len() {
            g.codebook[z][i] += dq[i] + 2.0 * scale * model.k2 * (q[i] - v[i]);
        }
        // straight-through: the decoder-input gradient is copied to v
        let dv: Vec<f64> = (0..v.len())
            .map(|i| dq[i] + 2.0 * scale * model.k1 * (v[i] - q[i]))
            .collect();
        model.encoder.backward(x, &h_enc, &dv, &mut g.encoder);
    }
    g
}

/// Halves the learning rate after `patience` consecutive epochs whose relative
/// improvement over the previous epoch is below `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauHalving {
    pub lr: f64,
    pub threshold: f64,
    pub patience: usize,
    stagnant: usize,
    previous: Option<f64>,
}

impl PlateauHalving {
    pub fn new(lr: f64, threshold: f64, patience: usize) -> Self {
        PlateauHalving {
            lr,
            threshold,
            patience,
            stagnant: 0,
            previous: None,
        }
    }

    /// Records an epoch loss; returns the learning rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if let Some(prev) = self.previous {
            let rel = (prev - loss) / prev.abs().max(f64::MIN_POSITIVE);
            if rel < self.threshold {
                self.stagnant += 1;
            } else {
                self.stagnant = 0;
            }
            if self.stagnant >= self.patience {
                self.lr *= 0.5;
                self.stagnant = 0;
            }
        }
        self.previous = Some(loss);
        self.lr
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            **p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

fn flat_params(m: &mut VqVaeModel) -> Vec<&mut f64> {
    let mut out: Vec<&mut f64> = Vec::new();
    let VqVaeModel {
        encoder,
        codebook,
        decoder,
        ..
    } = m;
    for p in encoder.params_mut() {
        out.extend(p.iter_mut());
    }
    for row in codebook.iter_mut() {
        out.extend(row.iter_mut());
    }
    for p in decoder.params_mut() {
        out.extend(p.iter_mut());
    }
    out
}

fn flat_grads(g: &mut Gradients) -> Vec<f64> {
    let mut out = Vec::new();
    for p in g.encoder.params_mut() {
        out.extend_from_slice(p);
    }
    for row in &g.codebook {
        out.extend_from_slice(row);
    }
    for p in g.decoder.params_mut() {
        out.extend_from_slice(p);
    }
    out
}

/// k-means++ seeding of the codebook on encoder outputs.
fn init_codebook(model: &mut VqVaeModel, frames: &[&[f64]], rng: &mut ChaCha8Rng) {
    let mut idx: Vec<usize> = (0..frames.len()).collect();
    idx.shuffle(rng);
    idx.truncate(4000);
    let latents: Vec<Vec<f64>> = idx.iter().map(|&i| model.encode(frames[i])).collect();
    let mut rows: Vec<Vec<f64>> = vec![latents[0].clone()];
    let mut d2: Vec<f64> = latents
        .iter()
        .map(|l| squared_distance(l, &rows[0]))
        .collect();
    while rows.len() < model.units() {
        let total: f64 = d2.iter().sum();
        let next = if total <= 1e-24 {
            // fewer distinct latents than units: jitter an existing row
            let base = &rows[rows.len() % rows.len().max(1)];
            base.iter()
                .map(|v| v + rng.random_range(-1e-3..1e-3))
                .collect()
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut pick = d2.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            latents[pick].clone()
        };
        for (d, l) in d2.iter_mut().zip(&latents) {
            *d = d.min(squared_distance(l, &next));
        }
        rows.push(next);
    }
    model.codebook = rows;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Full-corpus loss after each epoch.
    pub epochs: Vec<LossBreakdown>,
    /// Learning rate used in each epoch.
    pub learning_rates: Vec<f64>,
}

pub fn vqvae_train(
    corpus: &[FrameSequence],
    cfg: &VqVaeConfig,
    exec: Exec,
) -> Result<(VqVaeModel, TrainTrace)> {
    let first = corpus
        .first()
        .ok_or_else(|| UwsError::invalid("vq-vae training", "need at least one utterance"))?;
    if cfg.units < 2 || cfg.latent_dim == 0 || cfg.hidden_dim == 0 || cfg.batch_size == 0 {
        return Err(UwsError::invalid(
            "vq-vae config",
            "units >= 2, nonzero dims and batch size required",
        ));
    }
    let dim = first.dim;
    if let Some(bad) = corpus.iter().find(|s| s.dim != dim) {
        return Err(UwsError::dim(
            Some(&bad.utterance_id),
            "inconsistent feature dims",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = VqVaeModel::new(dim, cfg, &mut rng);
    let frames: Vec<&[f64]> = corpus.iter().flat_map(|s| s.rows()).collect();
    init_codebook(&mut model, &frames, &mut rng);

    let n_params = flat_params(&mut model).len();
    let mut adam = Adam::new(n_params);
    let mut schedule = PlateauHalving::new(
        cfg.learning_rate,
        cfg.stagnation_threshold,
        cfg.stagnation_epochs,
    );
    let mut lr = cfg.learning_rate;
    let mut trace = TrainTrace {
        epochs: Vec::new(),
        learning_rates: Vec::new(),
    };
    let mut order: Vec<usize> = (0..frames.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| frames[i]).collect();
            let mut g = gradients(&model, &batch);
            if !g.loss.is_finite() {
                return Err(UwsError::Numerical(format!(
                    "vq-vae loss diverged (NaN/inf) in epoch {}",
                    epoch + 1
                )));
            }
            let flat = flat_grads(&mut g);
            adam.step(&mut flat_params(&mut model), &flat, lr);
        }
        let loss = corpus_loss(corpus, &model, exec)?;
        if !loss.total.is_finite() {
            return Err(UwsError::Numerical(format!(
                "vq-vae loss diverged (NaN/inf) after epoch {}",
                epoch + 1
            )));
        }
        trace.learning_rates.push(lr);
        trace.epochs.push(loss);
        lr = schedule.observe(loss.total);
    }
    Ok((model, trace))
}
