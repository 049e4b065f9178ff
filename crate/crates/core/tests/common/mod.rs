//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uws::aud::{HmmState, Mixture, PhoneLoop, Topology, UnitHmm};
use uws::corpus::FrameSequence;

const LN_2PI: f64 = 1.8378770664093453;

pub fn random_loop(n_units: usize, topo: Topology, seed: u64) -> PhoneLoop {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let simplex = |n: usize, rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let units = (0..n_units)
        .map(|_| UnitHmm {
            states: (0..topo.n_states)
                .map(|_| {
                    let p = rng.random_range(0.1..0.9);
                    HmmState {
                        transitions: [p, 1.0 - p],
                        emission: Mixture {
                            weights: simplex(topo.n_components, &mut rng),
                            means: (0..topo.n_components)
                                .map(|_| {
                                    (0..topo.dim).map(|_| rng.random_range(-2.0..2.0)).collect()
                                })
                                .collect(),
                            variances: (0..topo.n_components)
                                .map(|_| {
                                    (0..topo.dim).map(|_| rng.random_range(0.3..2.0)).collect()
                                })
                                .collect(),
                        },
                    }
                })
                .collect(),
        })
        .collect();
    PhoneLoop {
        topology: topo,
        units,
        weights: simplex(n_units, &mut rng),
        silence_unit: None,
    }
}

pub fn random_frames(n: usize, dim: usize, seed: u64) -> FrameSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let frames = (0..n * dim).map(|_| rng.random_range(-2.5..2.5)).collect();
    FrameSequence::new("enum", dim, frames, 0.01).unwrap()
}

fn density(m: &Mixture, x: &[f64]) -> f64 {
    let mut total = 0.0;
    for c in 0..m.weights.len() {
        let mut ll = m.weights[c].ln();
        for d in 0..x.len() {
            let v = m.variances[c][d];
            let z = x[d] - m.means[c][d];
            ll += -0.5 * (LN_2PI + v.ln() + z * z / v);
        }
        total += ll.exp();
    }
    total.ln()
}

/// Every legal state path with its summed and best log score. With one
/// state per unit a self-loop and an exit/re-entry join the same pair of
/// states, so a state path can carry two transition scores per step.
pub fn enumerate_paths(pl: &PhoneLoop, seq: &FrameSequence) -> Vec<(Vec<usize>, f64, f64)> {
    let s_n = pl.topology.n_states;
    let j = pl.units.len() * s_n;
    let n = seq.n_frames();
    let state = |i: usize| &pl.units[i / s_n].states[i % s_n];
    let mut out = Vec::new();
    let total = j.pow(n as u32);
    for code in 0..total {
        let mut path = Vec::with_capacity(n);
        let mut c = code;
        for _ in 0..n {
            path.push(c % j);
            c /= j;
        }
        if path[0] % s_n != 0 || path[n - 1] % s_n != s_n - 1 {
            continue;
        }
        let first = pl.weights[path[0] / s_n].ln() + density(&state(path[0]).emission, seq.row(0));
        let (mut sum, mut best) = (first, first);
        let mut legal = true;
        for t in 1..n {
            let (a, b) = (path[t - 1], path[t]);
            let mut options = Vec::new();
            if a == b {
                options.push(state(a).transitions[0].ln());
            }
            if b == a + 1 && a % s_n != s_n - 1 {
                options.push(state(a).transitions[1].ln());
            }
            if a % s_n == s_n - 1 && b % s_n == 0 {
                options.push(state(a).transitions[1].ln() + pl.weights[b / s_n].ln());
            }
            if options.is_empty() {
                legal = false;
                break;
            }
            let emit = density(&state(b).emission, seq.row(t));
            sum += logsumexp(&options) + emit;
            best += options.iter().copied().fold(f64::NEG_INFINITY, f64::max) + emit;
        }
        if legal {
            out.push((path, sum, best));
        }
    }
    out
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Largest deviation of forward-backward and Viterbi from enumeration, and
/// whether the Viterbi path matched, over the given instance.
pub fn oracle_check(pl: &PhoneLoop, seq: &FrameSequence) -> (f64, bool) {
    let paths = enumerate_paths(pl, seq);
    let scores: Vec<f64> = paths.iter().map(|p| p.1).collect();
    let log_z = logsumexp(&scores);
    let s_n = pl.topology.n_states;
    let j = pl.units.len() * s_n;
    let n = seq.n_frames();
    let mut occ = vec![0.0; n * j];
    for (path, s, _) in &paths {
        let w = (s - log_z).exp();
        for (t, i) in path.iter().enumerate() {
            occ[t * j + i] += w;
        }
    }
    let params = pl.point_params();
    let post = uws::aud::forward_backward(seq, &params).unwrap();
    let mut diff = (post.log_marginal - log_z).abs();
    for (a, b) in post.states.iter().zip(&occ) {
        diff = diff.max((a - b).abs());
    }
    let best = paths
        .iter()
        .fold(None::<&(Vec<usize>, f64, f64)>, |acc, p| match acc {
            Some(a) if a.2 >= p.2 => Some(a),
            _ => Some(p),
        })
        .unwrap();
    let (vpath, vscore) = uws::aud::viterbi_path(seq, &params).unwrap();
    diff = diff.max((vscore - best.2).abs());
    (diff, vpath == best.0)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Independent forward pass of an `affine -> tanh -> affine` map.
fn mlp_forward(m: &uws::vq::Mlp, x: &[f64]) -> Vec<f64> {
    let layer = |a: &uws::vq::Affine, x: &[f64]| -> Vec<f64> {
        (0..a.n_out)
            .map(|o| a.b[o] + (0..a.n_in).map(|i| a.w[o * a.n_in + i] * x[i]).sum::<f64>())
            .collect()
    };
    let h: Vec<f64> = layer(&m.hidden, x).into_iter().map(f64::tanh).collect();
    layer(&m.output, &h)
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Objective seen by the codebook and decoder: reconstruction plus the
/// codebook term, with encoder outputs and assignments held fixed.
fn codebook_decoder_objective(
    m: &uws::vq::VqVaeModel,
    frames: &[Vec<f64>],
    v: &[Vec<f64>],
    z: &[usize],
) -> f64 {
    let n = frames.len() as f64;
    frames
        .iter()
        .zip(v)
        .zip(z)
        .map(|((x, v), &z)| {
            let q = &m.codebook[z];
            sq(x, &mlp_forward(&m.decoder, q)) + m.k2 * sq(q, v)
        })
        .sum::<f64>()
        / n
}

/// Largest relative error between analytic and central-difference
/// gradients over every codebook and decoder parameter of a random model.
pub fn vq_gradient_check(seed: u64) -> f64 {
    use uws::vq::{gradients, quantize_nearest, VqVaeConfig, VqVaeModel};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 2 + (seed as usize % 3);
    let cfg = VqVaeConfig {
        units: 3 + (seed as usize % 3),
        latent_dim: 2 + (seed as usize % 2),
        hidden_dim: 3,
        ..VqVaeConfig::default()
    };
    let model = VqVaeModel::new(dim, &cfg, &mut rng);
    let frames: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let v: Vec<Vec<f64>> = frames
        .iter()
        .map(|x| mlp_forward(&model.encoder, x))
        .collect();
    let z: Vec<usize> = v
        .iter()
        .map(|v| quantize_nearest(v, &model.codebook))
        .collect();
    let refs: Vec<&[f64]> = frames.iter().map(Vec::as_slice).collect();
    let g = gradients(&model, &refs);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, bump: &dyn Fn(&mut VqVaeModel, f64)| {
        let mut plus = model.clone();
        bump(&mut plus, h);
        let mut minus = model.clone();
        bump(&mut minus, -h);
        let numeric = (codebook_decoder_objective(&plus, &frames, &v, &z)
            - codebook_decoder_objective(&minus, &frames, &v, &z))
            / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(rel);
    };
    for u in 0..model.codebook.len() {
        for i in 0..model.codebook[u].len() {
            check(g.codebook[u][i], &|m, d| m.codebook[u][i] += d);
        }
    }
    for i in 0..model.decoder.hidden.w.len() {
        check(g.decoder.hidden.w[i], &|m, d| m.decoder.hidden.w[i] += d);
    }
    for i in 0..model.decoder.hidden.b.len() {
        check(g.decoder.hidden.b[i], &|m, d| m.decoder.hidden.b[i] += d);
    }
    for i in 0..model.decoder.output.w.len() {
        check(g.decoder.output.w[i], &|m, d| m.decoder.output.w[i] += d);
    }
    for i in 0..model.decoder.output.b.len() {
        check(g.decoder.output.b[i], &|m, d| m.decoder.output.b[i] += d);
    }
    worst
}

/// Joint log-probability of a word sequence as a product of sequential CRP
/// predictives, seating one word at a time.
pub fn crp_sequential_ln_joint(
    words: &[Vec<u32>],
    alpha0: f64,
    alphabet: usize,
    p_boundary: f64,
) -> f64 {
    let mut seen: std::collections::HashMap<&[u32], usize> = std::collections::HashMap::new();
    let mut total = 0.0;
    for (n, w) in words.iter().enumerate() {
        let len = w.len() as f64;
        let base = p_boundary * (1.0 - p_boundary).powf(len - 1.0) / (alphabet as f64).powf(len);
        let c = seen.get(w.as_slice()).copied().unwrap_or(0) as f64;
        total += ((c + alpha0 * base) / (n as f64 + alpha0)).ln();
        *seen.entry(w.as_slice()).or_default() += 1;
    }
    total
}

/// Runs `sweeps` Gibbs sweeps and returns, over all sweeps, the number of
/// count-table mismatches and the largest joint log-probability difference
/// against [`crp_sequential_ln_joint`].
pub fn crp_consistency(
    corpus: &[uws::seq::UnitSequence],
    cfg: &uws::dpseg::DpsegConfig,
    sweeps: usize,
) -> (usize, f64) {
    let mut sampler = uws::dpseg::Sampler::new(corpus, cfg).unwrap();
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for s in 0..sweeps {
        sampler.sweep(cfg.temperature(s));
        if sampler.recount() != *sampler.state() {
            mismatches += 1;
        }
        let words: Vec<Vec<u32>> = (0..corpus.len())
            .flat_map(|u| sampler.words(u))
            .map(<[u32]>::to_vec)
            .collect();
        let oracle =
            crp_sequential_ln_joint(&words, cfg.alpha0, sampler.alphabet_size(), cfg.p_boundary);
        let live = sampler.ln_joint();
        assert!(live.is_finite());
        worst = worst.max((live - oracle).abs());
    }
    (mismatches, worst)
}

/// Boundary micro-case: per-utterance hypothesis and gold boundaries, the
/// tolerance, and hand-counted (hits, hyp, gold) with P, R, F as fractions.
pub struct BoundaryCase {
    pub name: &'static str,
    pub hyp: Vec<Vec<f64>>,
    pub gold: Vec<Vec<f64>>,
    pub tolerance: f64,
    pub counts: (usize, usize, usize),
    pub prf: [(u32, u32); 3],
}

pub fn frac((a, b): (u32, u32)) -> f64 {
    a as f64 / b as f64
}

pub fn boundary_cases() -> Vec<BoundaryCase> {
    let c = |name, hyp: Vec<Vec<f64>>, gold: Vec<Vec<f64>>, tolerance, counts, prf| BoundaryCase {
        name,
        hyp,
        gold,
        tolerance,
        counts,
        prf,
    };
    vec![
        c(
            "half_and_half",
            vec![vec![3.0, 4.0]],
            vec![vec![3.0, 5.0]],
            0.0,
            (1, 2, 2),
            [(1, 2), (1, 2), (1, 2)],
        ),
        c(
            "identity",
            vec![vec![1.0, 2.0, 3.0]],
            vec![vec![1.0, 2.0, 3.0]],
            0.0,
            (3, 3, 3),
            [(1, 1), (1, 1), (1, 1)],
        ),
        c(
            "empty_hypothesis",
            vec![vec![]],
            vec![vec![2.0]],
            0.0,
            (0, 0, 1),
            [(0, 1), (0, 1), (0, 1)],
        ),
        c(
            "empty_gold",
            vec![vec![2.0]],
            vec![vec![]],
            0.0,
            (0, 1, 0),
            [(0, 1), (0, 1), (0, 1)],
        ),
        c(
            "within_tolerance",
            vec![vec![0.10, 0.31]],
            vec![vec![0.12, 0.30]],
            0.02,
            (2, 2, 2),
            [(1, 1), (1, 1), (1, 1)],
        ),
        c(
            "outside_tolerance",
            vec![vec![0.10]],
            vec![vec![0.125]],
            0.02,
            (0, 1, 1),
            [(0, 1), (0, 1), (0, 1)],
        ),
        c(
            "one_to_one",
            vec![vec![0.10, 0.11]],
            vec![vec![0.105]],
            0.02,
            (1, 2, 1),
            [(1, 2), (1, 1), (2, 3)],
        ),
        c(
            "micro_average",
            vec![vec![1.0, 2.0], vec![]],
            vec![vec![1.0], vec![4.0, 5.0, 6.0]],
            0.0,
            (1, 2, 4),
            [(1, 2), (1, 4), (1, 3)],
        ),
        c(
            "oversegmented",
            vec![vec![1.0, 2.0, 3.0, 4.0]],
            vec![vec![2.0, 4.0]],
            0.0,
            (2, 4, 2),
            [(1, 2), (1, 1), (2, 3)],
        ),
        c(
            "tolerance_edge",
            vec![vec![0.50]],
            vec![vec![0.52]],
            0.02,
            (1, 1, 1),
            [(1, 1), (1, 1), (1, 1)],
        ),
        c(
            "greedy_chain",
            vec![vec![0.10, 0.13]],
            vec![vec![0.12, 0.15]],
            0.02,
            (2, 2, 2),
            [(1, 1), (1, 1), (1, 1)],
        ),
        c(
            "both_empty",
            vec![vec![], vec![]],
            vec![vec![], vec![]],
            0.0,
            (0, 0, 0),
            [(0, 1), (0, 1), (0, 1)],
        ),
    ]
}

/// Token/type micro-case over symbolic segmentations, each utterance given
/// as its words (unit labels per word).
pub struct TypeCase {
    pub name: &'static str,
    pub hyp: Vec<Vec<Vec<&'static str>>>,
    pub gold: Vec<Vec<Vec<&'static str>>>,
    /// token P, R, F then type P, R, F, then hypothesis TTR.
    pub expected: [(u32, u32); 7],
}

pub fn type_cases() -> Vec<TypeCase> {
    vec![
        TypeCase {
            name: "identity",
            hyp: vec![vec![vec!["a", "b"], vec!["c"]]],
            gold: vec![vec![vec!["a", "b"], vec!["c"]]],
            expected: [(1, 1), (1, 1), (1, 1), (1, 1), (1, 1), (1, 1), (2, 2)],
        },
        TypeCase {
            name: "every_word_split",
            hyp: vec![vec![vec!["a"], vec!["b"], vec!["c"], vec!["d"]]],
            gold: vec![vec![vec!["a", "b"], vec!["c", "d"]]],
            expected: [(0, 1), (0, 1), (0, 1), (0, 1), (0, 1), (0, 1), (4, 4)],
        },
        TypeCase {
            name: "two_utterances",
            hyp: vec![
                vec![vec!["a", "b"], vec!["a", "b"]],
                vec![vec!["c", "a"], vec!["b"]],
            ],
            gold: vec![
                vec![vec!["a", "b"], vec!["a", "b"]],
                vec![vec!["c"], vec!["a", "b"]],
            ],
            expected: [(1, 2), (1, 2), (1, 2), (1, 3), (1, 2), (2, 5), (3, 4)],
        },
        TypeCase {
            name: "right_type_wrong_place",
            hyp: vec![vec![vec!["a"], vec!["a", "a"]]],
            gold: vec![vec![vec!["a", "a"], vec!["a"]]],
            expected: [(0, 1), (0, 1), (0, 1), (1, 1), (1, 1), (1, 1), (2, 2)],
        },
    ]
}

pub fn symbolic_segmentation(id: &str, words: &[Vec<&str>]) -> uws::seq::Segmentation {
    let labels: Vec<&str> = words.iter().flatten().copied().collect();
    let mut flags = Vec::new();
    for w in words {
        flags.extend(std::iter::repeat_n(false, w.len() - 1));
        flags.push(true);
    }
    uws::seq::Segmentation::from_boundaries(&uws::seq::UnitSequence::symbolic(id, &labels), &flags)
}

/// Checks every micro-case with exact equality; returns the names of failures.
pub fn metric_micro_case_failures() -> Vec<String> {
    use uws::eval::{boundary_score, token_type_score};
    let mut failed = Vec::new();
    for c in boundary_cases() {
        let r = boundary_score(&c.hyp, &c.gold, c.tolerance).unwrap();
        let ok = (r.hits, r.hyp, r.gold) == c.counts
            && r.precision == frac(c.prf[0])
            && r.recall == frac(c.prf[1])
            && r.fscore == frac(c.prf[2]);
        if !ok {
            failed.push(c.name.to_string());
        }
    }
    for c in type_cases() {
        let build = |utts: &[Vec<Vec<&str>>]| -> Vec<uws::seq::Segmentation> {
            utts.iter()
                .enumerate()
                .map(|(i, w)| symbolic_segmentation(&format!("u{i}"), w))
                .collect()
        };
        let r = token_type_score(&build(&c.hyp), &build(&c.gold)).unwrap();
        let got = [
            r.token_precision,
            r.token_recall,
            r.token_fscore,
            r.type_precision,
            r.type_recall,
            r.type_fscore,
            r.type_token_ratio,
        ];
        if got.iter().zip(&c.expected).any(|(g, e)| *g != frac(*e)) {
            failed.push(c.name.to_string());
        }
    }
    failed
}
