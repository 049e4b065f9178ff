mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use uws::corpus::FrameSequence;
use uws::vq::{
    contrastive_loss, gradients, grouped_quantize, log_sigmoid, quantize_nearest, vqvae_loss,
    vqvae_train, ContrastiveLossConfig, GroupedCodebook, QuantizeMode, StepTransform, VqVaeConfig,
    VqVaeModel,
};
use uws::Exec;

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn small_model(dim: usize, seed: u64) -> VqVaeModel {
    let cfg = VqVaeConfig {
        units: 4,
        latent_dim: 3,
        hidden_dim: 5,
        ..VqVaeConfig::default()
    };
    VqVaeModel::new(dim, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn random_seq(n: usize, dim: usize, seed: u64) -> FrameSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    FrameSequence::from_rows("r", &rows, 0.01).unwrap()
}

#[test]
fn codebook_and_decoder_gradients_match_finite_differences() {
    for seed in 0..10 {
        let err = common::vq_gradient_check(seed);
        assert!(err <= 1e-4, "model {seed}: relative error {err}");
    }
}

#[test]
fn encoder_receives_straight_through_gradient() {
    let model = small_model(3, 4);
    let seq = random_seq(5, 3, 9);
    let frames: Vec<&[f64]> = seq.rows().collect();
    let g = gradients(&model, &frames);
    let v0: Vec<Vec<f64>> = frames.iter().map(|x| model.encode(x)).collect();
    let z: Vec<usize> = v0
        .iter()
        .map(|v| quantize_nearest(v, &model.codebook))
        .collect();
    // decoder input is q + (v - sg[v]); the commitment term pulls v to q
    let surrogate = |m: &VqVaeModel| -> f64 {
        frames
            .iter()
            .zip(&v0)
            .zip(&z)
            .map(|((x, v0), &z)| {
                let v = m.encode(x);
                let q = &model.codebook[z];
                let input: Vec<f64> = q
                    .iter()
                    .zip(&v)
                    .zip(v0)
                    .map(|((q, v), v0)| q + v - v0)
                    .collect();
                sq(x, &m.decode(&input)) + m.k1 * sq(&v, q)
            })
            .sum::<f64>()
            / frames.len() as f64
    };
    let h = 1e-5;
    for i in 0..model.encoder.hidden.w.len() {
        let mut p = model.clone();
        p.encoder.hidden.w[i] += h;
        let mut m = model.clone();
        m.encoder.hidden.w[i] -= h;
        let numeric = (surrogate(&p) - surrogate(&m)) / (2.0 * h);
        let a = g.encoder.hidden.w[i];
        assert!(
            (a - numeric).abs() <= 1e-4 * a.abs().max(numeric.abs()).max(1e-6),
            "{i}: {a} vs {numeric}"
        );
    }
}

#[test]
fn loss_matches_per_frame_recomputation() {
    let model = small_model(3, 1);
    let seq = random_seq(7, 3, 2);
    let l = vqvae_loss(&seq, &model).unwrap();
    let (mut r, mut c, mut b) = (0.0, 0.0, 0.0);
    for x in seq.rows() {
        let v = model.encode(x);
        let dists: Vec<f64> = model.codebook.iter().map(|e| sq(e, &v)).collect();
        let z = (0..dists.len()).fold(0, |best, u| if dists[u] < dists[best] { u } else { best });
        r += sq(x, &model.decode(&model.codebook[z]));
        c += model.k1 * dists[z];
        b += model.k2 * dists[z];
    }
    let n = seq.n_frames() as f64;
    assert!((l.reconstruction - r / n).abs() < 1e-12);
    assert!((l.commitment - c / n).abs() < 1e-12);
    assert!((l.codebook - b / n).abs() < 1e-12);
    assert!((l.total - (r + c + b) / n).abs() < 1e-12);
}

/// A model whose encoder and decoder are exact identities on a small box.
fn identity_model(dim: usize) -> VqVaeModel {
    let mut m = small_model(dim, 0);
    let eye = |n: usize| -> Vec<f64> {
        (0..n * n)
            .map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 })
            .collect()
    };
    for mlp in [&mut m.encoder, &mut m.decoder] {
        mlp.hidden.n_in = dim;
        mlp.hidden.n_out = dim;
        mlp.hidden.w = eye(dim);
        mlp.hidden.b = vec![0.0; dim];
        mlp.output.n_in = dim;
        mlp.output.n_out = dim;
        mlp.output.w = eye(dim);
        mlp.output.b = vec![0.0; dim];
    }
    m
}

#[test]
fn exact_fit_and_term_isolation() {
    let mut m = identity_model(2);
    m.codebook = vec![vec![0.3, -0.2], vec![-0.4, 0.1]];
    // decoder is tanh, so reconstruct through it
    let x: Vec<f64> = m.decode(&m.codebook[0]);
    let v = m.codebook[0].clone();
    let (z, recon, qerr) = m.frame_terms(&x, &v);
    assert_eq!((z, recon, qerr), (0, 0.0, 0.0));

    let delta = [0.01, -0.02];
    let shifted: Vec<f64> = v.iter().zip(delta).map(|(a, d)| a + d).collect();
    let (z, recon, qerr) = m.frame_terms(&x, &shifted);
    assert_eq!(z, 0);
    assert_eq!(recon, 0.0);
    let expected = (m.k1 + m.k2) * (delta[0] * delta[0] + delta[1] * delta[1]);
    assert!(((m.k1 + m.k2) * qerr - expected).abs() < 1e-15);
}

#[test]
fn loss_is_invariant_to_codebook_order() {
    let model = small_model(3, 5);
    let seq = random_seq(12, 3, 6);
    let mut permuted = model.clone();
    permuted.codebook.reverse();
    let a = vqvae_loss(&seq, &model).unwrap();
    let b = vqvae_loss(&seq, &permuted).unwrap();
    assert!((a.total - b.total).abs() < 1e-12);
    let u = model.units();
    for x in seq.rows() {
        assert_eq!(model.assign(x), u - 1 - permuted.assign(x));
    }
}

fn two_clusters(n: usize, seed: u64) -> (Vec<FrameSequence>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let centres = [[-3.0, -3.0, 0.0], [3.0, 3.0, 0.0]];
    let mut labels = Vec::new();
    let seqs = (0..n)
        .map(|u| {
            let rows: Vec<Vec<f64>> = (0..20)
                .map(|_| {
                    let c = rng.random_range(0..2);
                    labels.push(c);
                    centres[c]
                        .iter()
                        .map(|m| m + noise.sample(&mut rng))
                        .collect()
                })
                .collect();
            FrameSequence::from_rows(format!("u{u}"), &rows, 0.01).unwrap()
        })
        .collect();
    (seqs, labels)
}

fn cluster_cfg(epochs: usize) -> VqVaeConfig {
    VqVaeConfig {
        units: 2,
        latent_dim: 2,
        hidden_dim: 8,
        epochs,
        batch_size: 64,
        seed: 11,
        ..VqVaeConfig::default()
    }
}

#[test]
fn two_clusters_map_to_two_units() {
    let (seqs, labels) = two_clusters(20, 3);
    let (model, _) = vqvae_train(&seqs, &cluster_cfg(10), Exec::default()).unwrap();
    let assigned: Vec<usize> = seqs
        .iter()
        .flat_map(|s| s.rows().map(|x| model.assign(x)).collect::<Vec<_>>())
        .collect();
    let same = assigned.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64;
    let acc = (same / labels.len() as f64).max(1.0 - same / labels.len() as f64);
    assert!(acc >= 0.99, "accuracy {acc}");
}

/// Least-squares slope of the commitment term over the last ten epochs, once the latent
/// space has stopped spreading out.
#[test]
fn quantization_error_trends_down() {
    let (seqs, _) = two_clusters(10, 5);
    let (_, trace) = vqvae_train(&seqs, &cluster_cfg(30), Exec::default()).unwrap();
    let k1: Vec<f64> = trace.epochs[20..].iter().map(|e| e.commitment).collect();
    let n = k1.len() as f64;
    let mean_t = (n - 1.0) / 2.0;
    let mean_y = k1.iter().sum::<f64>() / n;
    let (num, den) = k1
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(num, den), (t, y)| {
            let dt = t as f64 - mean_t;
            (num + dt * (y - mean_y), den + dt * dt)
        });
    assert!(
        num / den <= 0.0,
        "commitment slope {} over {k1:?}",
        num / den
    );
}

#[test]
fn training_is_deterministic() {
    let (seqs, _) = two_clusters(4, 8);
    let cfg = cluster_cfg(3);
    let (a, ta) = vqvae_train(&seqs, &cfg, Exec::Parallel).unwrap();
    let (b, tb) = vqvae_train(&seqs, &cfg, Exec::Sequential).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(a, b);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(3, 2);
    let p = dir.path().join("m.vq");
    m.save(&p).unwrap();
    assert_eq!(VqVaeModel::load(&p).unwrap(), m);
}

#[test]
fn contrastive_loss_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, dim) = (6, 3);
    let mut vecs = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    };
    let context = vecs(t);
    let targets = vecs(t);
    let negatives: Vec<Vec<Vec<f64>>> = (0..t).map(|_| vecs(2)).collect();
    let steps: Vec<StepTransform> = (0..2)
        .map(|_| StepTransform {
            w: vecs(dim).concat(),
            b: vecs(1).concat(),
        })
        .collect();
    let cfg = ContrastiveLossConfig {
        steps: steps.clone(),
        lambda: 0.7,
        n_negatives: 2,
    };
    let got = contrastive_loss(&context, &targets, &negatives, &cfg).unwrap();
    let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut want = 0.0;
    for (k0, s) in steps.iter().enumerate() {
        let k = k0 + 1;
        for i in 0..t - k {
            let h: Vec<f64> = (0..dim)
                .map(|o| {
                    s.b[o]
                        + (0..dim)
                            .map(|j| s.w[o * dim + j] * context[i][j])
                            .sum::<f64>()
                })
                .collect();
            let dot = |a: &[f64]| a.iter().zip(&h).map(|(x, y)| x * y).sum::<f64>();
            want += sigma(dot(&targets[i + k])).ln();
            let neg: f64 = negatives[i]
                .iter()
                .map(|n| sigma(-dot(n)).ln())
                .sum::<f64>()
                / 2.0;
            want += 0.7 * neg;
        }
    }
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
}

proptest! {
    #[test]
    fn hard_grouped_quantization_is_per_group_optimal(
        seed in 0u64..500,
        z in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let gc = GroupedCodebook::random(2, 4, 4, seed).unwrap();
        let (idx, zhat) = grouped_quantize(&z, &gc, QuantizeMode::Hard).unwrap();
        for g in 0..2 {
            let part = &z[g * 2..g * 2 + 2];
            let chosen = sq(part, &zhat[g * 2..g * 2 + 2]);
            for e in &gc.entries[g] {
                prop_assert!(chosen <= sq(part, e) + 1e-15);
            }
            prop_assert_eq!(&zhat[g * 2..g * 2 + 2], gc.entries[g][idx[g]].as_slice());
        }
    }

    #[test]
    fn nearest_is_argmin_with_lowest_index(
        rows in prop::collection::vec(prop::collection::vec(-3i32..3, 2), 2..8),
        v in prop::collection::vec(-3i32..3, 2),
    ) {
        let book: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let z = quantize_nearest(&v, &book);
        let best = book.iter().map(|e| sq(e, &v)).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(sq(&book[z], &v), best);
        prop_assert!(book[..z].iter().all(|e| sq(e, &v) > best));
    }
}
