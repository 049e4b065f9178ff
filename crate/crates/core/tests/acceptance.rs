//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero when any of them fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use uws::aud::{
    fit_hier_subspace, fit_subspace, forward_backward, frame_purity, train_hmm, train_hshmm,
    train_shmm, AudConfig, AudModel, LabeledCorpus, SubspaceConfig, Topology,
};
use uws::corpus::{generate_synthetic, SyntheticCorpus, SyntheticSpec};
use uws::dpseg::DpsegConfig;
use uws::features::{extract_batch, write_wav, MfccConfig};
use uws::pipeline::{
    artifact_hashes, run_pipeline, Discretizer, PipelineConfig, RunReport, UwsMethod,
};
use uws::units::PostMode;
use uws::Exec;

const LEXICON: [&str; 5] = ["012", "34", "1403", "230", "4121"];

/// The regression corpus: 5 units, 5 words, fixed seed.
fn regression_spec(n_utterances: usize) -> SyntheticSpec {
    let mut spec = SyntheticSpec::new(5, 4, &LEXICON, n_utterances, 2024);
    spec.silence_prob = 0.2;
    spec
}

/// Source corpus whose words are single units.
fn source_spec(units: usize, dim: usize, n: usize, seed: u64) -> SyntheticSpec {
    let words: Vec<String> = (0..units).map(|u| u.to_string()).collect();
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    let mut spec = SyntheticSpec::new(units, dim, &refs, n, seed);
    spec.silence_prob = 0.3;
    spec
}

fn labeled(c: &SyntheticCorpus, name: &str) -> LabeledCorpus {
    LabeledCorpus {
        name: name.into(),
        features: c.features.clone(),
        frame_labels: c.frame_labels.clone(),
    }
}

fn aud_cfg(units: usize, components: usize, iterations: usize) -> AudConfig {
    AudConfig {
        units,
        n_components: components,
        iterations,
        seed: 1,
        ..AudConfig::default()
    }
}

fn sub_cfg(embedding_dim: usize, language_dim: usize, components: usize) -> SubspaceConfig {
    SubspaceConfig {
        embedding_dim,
        language_dim,
        n_components: components,
        em_iterations: 5,
        ..SubspaceConfig::default()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(limit: Duration, started: Instant) -> (bool, String) {
    let took = started.elapsed();
    (
        took < limit,
        format!(
            "{:.1} s of {} s allowed",
            took.as_secs_f64(),
            limit.as_secs()
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let (mut worst, mut instances, mut viterbi_ok, mut impossible) = (0.0f64, 0, 0, 0);
    for n_units in 1..=2 {
        for n_states in 1..=3 {
            for n_frames in 1..=4 {
                for seed in 0..4u64 {
                    let topo = Topology::new(n_states, 2, 2).unwrap();
                    let tag = (n_units * 100 + n_states * 10 + n_frames) as u64;
                    let pl = common::random_loop(n_units, topo, tag * 7 + seed);
                    let seq = common::random_frames(n_frames, 2, tag * 13 + seed);
                    instances += 1;
                    if n_frames < n_states {
                        // no path can leave a left-to-right unit this early
                        let none = common::enumerate_paths(&pl, &seq).is_empty();
                        let refused = forward_backward(&seq, &pl.point_params()).is_err();
                        impossible += (none && refused) as usize;
                        viterbi_ok += (none && refused) as usize;
                        continue;
                    }
                    let (diff, same) = common::oracle_check(&pl, &seq);
                    worst = worst.max(diff);
                    viterbi_ok += same as usize;
                }
            }
        }
    }
    let (fast, time) = within(Duration::from_secs(10), started);
    check(
        worst < 1e-10 && viterbi_ok == instances && fast,
        format!(
            "{instances} instances ({impossible} without a legal path), max |diff| {worst:.2e}, viterbi {viterbi_ok}/{instances}, {time}"
        ),
    )
}

fn monotone_elbo() -> Outcome {
    let started = Instant::now();
    let corpus = generate_synthetic(&regression_spec(50)).unwrap();
    let silences: Vec<_> = corpus
        .manifest
        .utterances
        .iter()
        .map(|u| u.silences.clone())
        .collect();
    let sources: Vec<SyntheticCorpus> = [31, 32]
        .iter()
        .map(|&s| generate_synthetic(&source_spec(5, 4, 30, s)).unwrap())
        .collect();
    let labeled_sources: Vec<LabeledCorpus> = sources
        .iter()
        .enumerate()
        .map(|(i, c)| labeled(c, &format!("src{i}")))
        .collect();
    let cfg = aud_cfg(20, 2, 20);
    let flat = fit_subspace(&labeled_sources, &sub_cfg(4, 0, 2), Exec::default()).unwrap();
    let hier = fit_hier_subspace(&labeled_sources, &sub_cfg(4, 1, 2), Exec::default()).unwrap();
    let (_, hmm) = train_hmm(&corpus.features, &silences, &cfg, Exec::default()).unwrap();
    let (_, shmm) = train_shmm(&corpus.features, &silences, &flat, &cfg, Exec::default()).unwrap();
    let (_, hshmm) =
        train_hshmm(&corpus.features, &silences, &hier, &cfg, Exec::default()).unwrap();
    let traces = [("hmm", hmm), ("shmm", shmm), ("hshmm", hshmm)];
    let full = traces
        .iter()
        .all(|(_, t)| t.elbo.len() == 21 && t.elbo.iter().all(|v| v.is_finite()));
    let drops: Vec<String> = traces
        .iter()
        .map(|(n, t)| format!("{n} max drop {:.1e}", t.max_decrease()))
        .collect();
    let monotone = traces.iter().all(|(_, t)| t.max_decrease() <= 1e-6);
    let (fast, time) = within(Duration::from_secs(300), started);
    check(
        monotone && full && fast,
        format!("{}, {time}", drops.join(", ")),
    )
}

fn gradient_checks() -> Outcome {
    let worst = (0..10)
        .map(common::vq_gradient_check)
        .fold(0.0f64, f64::max);
    check(
        worst <= 1e-4,
        format!("10 models, worst relative error {worst:.2e}"),
    )
}

/// A written corpus with its manifest path.
struct Written {
    _dir: tempfile::TempDir,
    manifest: PathBuf,
    root: PathBuf,
}

fn write_corpus(c: &SyntheticCorpus) -> Written {
    let dir = tempfile::tempdir().unwrap();
    let manifest = c.write_to_dir(dir.path().join("corpus")).unwrap();
    let root = dir.path().to_path_buf();
    Written {
        _dir: dir,
        manifest,
        root,
    }
}

fn pipeline_cfg(
    manifest: &Path,
    out: &Path,
    disc: Discretizer,
    post: PostMode,
    uws: UwsMethod,
) -> PipelineConfig {
    PipelineConfig {
        manifest: manifest.to_path_buf(),
        output_dir: out.to_path_buf(),
        seed: 1,
        discretizer: disc,
        post,
        uws,
        aud: aud_cfg(20, 2, 20),
        ..Default::default()
    }
}

fn boundary_f(r: &RunReport) -> f64 {
    r.boundary_f().unwrap_or(f64::NAN)
}

/// Runs of the regression corpus shared by criteria 4 and 5b.
struct RegressionRuns {
    gold_raw: f64,
    hmm_raw: f64,
    hmm_sil: f64,
    took: Duration,
}

fn regression_runs() -> RegressionRuns {
    let started = Instant::now();
    let corpus = write_corpus(&generate_synthetic(&regression_spec(500)).unwrap());
    let run = |disc, post, name: &str| {
        let out = corpus.root.join(name);
        run_pipeline(
            &pipeline_cfg(&corpus.manifest, &out, disc, post, UwsMethod::Dpseg),
            Exec::default(),
        )
        .unwrap()
    };
    let gold_raw = boundary_f(&run(Discretizer::Gold, PostMode::Raw, "gold"));
    let hmm_raw = boundary_f(&run(Discretizer::Hmm, PostMode::Raw, "hmm"));
    // same directory: the trained model is reused
    let hmm_sil = boundary_f(&run(Discretizer::Hmm, PostMode::PlusSil, "hmm"));
    RegressionRuns {
        gold_raw,
        hmm_raw,
        hmm_sil,
        took: started.elapsed(),
    }
}

fn recoverability(runs: &RegressionRuns) -> Outcome {
    let fast = runs.took < Duration::from_secs(900);
    check(
        runs.gold_raw >= 0.80 && runs.hmm_raw >= 0.60 && fast,
        format!(
            "gold->dpseg F {:.3} (>= 0.80), hmm->dpseg F {:.3} (>= 0.60), {:.1} s of 900 s allowed",
            runs.gold_raw,
            runs.hmm_raw,
            runs.took.as_secs_f64()
        ),
    )
}

/// Source manifests for the subspace discretizers.
fn source_manifests(root: &Path) -> Vec<PathBuf> {
    [41, 42]
        .iter()
        .map(|&s| {
            let c = generate_synthetic(&source_spec(5, 4, 30, s)).unwrap();
            c.write_to_dir(root.join(format!("source{s}"))).unwrap()
        })
        .collect()
}

fn all_discretizer_cfg(
    manifest: &Path,
    out: &Path,
    sources: &[PathBuf],
    disc: Discretizer,
    post: PostMode,
) -> PipelineConfig {
    let mut cfg = pipeline_cfg(manifest, out, disc, post, UwsMethod::Dpseg);
    cfg.aud = aud_cfg(15, 2, 8);
    cfg.dpseg.n_sweeps = 20;
    cfg.subspace.sources = sources.to_vec();
    cfg.subspace.config = sub_cfg(4, if disc == Discretizer::Hshmm { 1 } else { 0 }, 2);
    cfg.vqvae.units = 15;
    cfg.vqvae.epochs = 5;
    cfg.vqvae.hidden_dim = 16;
    cfg.vqvae.latent_dim = 4;
    cfg
}

const DISCRETIZERS: [Discretizer; 4] = [
    Discretizer::Hmm,
    Discretizer::Shmm,
    Discretizer::Hshmm,
    Discretizer::Vqvae,
];

fn paper_trends(runs: &RegressionRuns) -> Outcome {
    let corpus = write_corpus(&generate_synthetic(&regression_spec(60)).unwrap());
    let sources = source_manifests(&corpus.root);
    let mut lines = Vec::new();
    let mut a_ok = true;
    for disc in DISCRETIZERS {
        let out = corpus.root.join(format!("trend-{}", disc.display_name()));
        let raw = run_pipeline(
            &all_discretizer_cfg(&corpus.manifest, &out, &sources, disc, PostMode::Raw),
            Exec::default(),
        )
        .unwrap();
        let sil = run_pipeline(
            &all_discretizer_cfg(&corpus.manifest, &out, &sources, disc, PostMode::PlusSil),
            Exec::default(),
        )
        .unwrap();
        let (r, s) = (&raw.unit_stats.raw, &sil.unit_stats.post);
        let ok = s.total_tokens < r.total_tokens && s.mean_seq_len < r.mean_seq_len;
        a_ok &= ok;
        lines.push(format!(
            "{}: tokens {}->{}, mean len {:.1}->{:.1}",
            disc.display_name(),
            r.total_tokens,
            s.total_tokens,
            r.mean_seq_len,
            s.mean_seq_len
        ));
    }

    let b_ok = runs.gold_raw >= runs.hmm_raw && runs.gold_raw >= runs.hmm_sil;

    let src = generate_synthetic(&source_spec(6, 3, 40, 100)).unwrap();
    let sub = fit_subspace(&[labeled(&src, "src")], &sub_cfg(4, 0, 1), Exec::default()).unwrap();
    let mut tspec = SyntheticSpec::new(6, 3, &["012", "345", "53", "1402"], 10, 7);
    tspec.units = Some(src.params.units.clone());
    tspec.silence_mean = Some(src.params.silence_mean.clone());
    tspec.silence_prob = 0.3;
    let target = generate_synthetic(&tspec).unwrap();
    let silences: Vec<_> = target
        .manifest
        .utterances
        .iter()
        .map(|u| u.silences.clone())
        .collect();
    let cfg = aud_cfg(12, 1, 15);
    let (hmm, _) = train_hmm(&target.features, &silences, &cfg, Exec::default()).unwrap();
    let (shmm, _) = train_shmm(&target.features, &silences, &sub, &cfg, Exec::default()).unwrap();
    let purity = |m: &AudModel| {
        let hyp: Vec<Vec<String>> = target
            .features
            .iter()
            .map(|f| m.frame_labels(f).unwrap())
            .collect();
        frame_purity(&hyp, &target.frame_labels).unwrap()
    };
    let (p_hmm, p_shmm) = (purity(&hmm), purity(&shmm));
    let c_ok = p_shmm >= p_hmm;

    check(
        a_ok && b_ok && c_ok,
        format!(
            "(a) {} | (b) topline F {:.3} vs HMM RAW {:.3}, HMM +SIL {:.3} | (c) purity SHMM {p_shmm:.3} vs HMM {p_hmm:.3}",
            lines.join("; "),
            runs.gold_raw,
            runs.hmm_raw,
            runs.hmm_sil
        ),
    )
}

fn metric_correctness() -> Outcome {
    let n = common::boundary_cases().len() + common::type_cases().len();
    let failed = common::metric_micro_case_failures();
    check(
        n >= 10 && failed.is_empty(),
        format!(
            "{} of {n} micro-cases exact{}",
            n - failed.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {failed:?}")
            }
        ),
    )
}

fn determinism() -> Outcome {
    let mut spec = regression_spec(25);
    spec.silence_prob = 0.3;
    let corpus = write_corpus(&generate_synthetic(&spec).unwrap());
    let sources = source_manifests(&corpus.root);
    let mut conditions: Vec<(Discretizer, PostMode, UwsMethod)> = DISCRETIZERS
        .iter()
        .map(|&d| (d, PostMode::PlusSil, UwsMethod::Dpseg))
        .collect();
    conditions.push((Discretizer::Gold, PostMode::Raw, UwsMethod::Align));
    conditions.push((Discretizer::Hmm, PostMode::Raw, UwsMethod::None));
    let mut differing = Vec::new();
    for (i, &(disc, post, uws)) in conditions.iter().enumerate() {
        let mut hashes = Vec::new();
        for rep in 0..2 {
            let out = corpus.root.join(format!("det{i}-{rep}"));
            let mut cfg = all_discretizer_cfg(&corpus.manifest, &out, &sources, disc, post);
            cfg.uws = uws;
            cfg.dpseg = DpsegConfig {
                n_sweeps: 15,
                ..cfg.dpseg
            };
            run_pipeline(&cfg, Exec::default()).unwrap();
            hashes.push(artifact_hashes(&out).unwrap());
        }
        let same_reports = std::fs::read(corpus.root.join(format!("det{i}-0/report.json")))
            .unwrap()
            == std::fs::read(corpus.root.join(format!("det{i}-1/report.json"))).unwrap();
        if hashes[0] != hashes[1] || !same_reports {
            differing.push(format!("{} {post} {uws:?}", disc.display_name()));
        }
    }

    let wav_dir = corpus.root.join("wav");
    std::fs::create_dir_all(&wav_dir).unwrap();
    let items: Vec<(String, PathBuf)> = (0..3)
        .map(|i| {
            let p = wav_dir.join(format!("w{i}.wav"));
            let samples: Vec<f64> = (0..6000)
                .map(|n| {
                    0.3 * ((n as f64) * (0.05 + 0.02 * i as f64)).sin()
                        + 0.05 * ((n * 7919 % 101) as f64 / 101.0 - 0.5)
                })
                .collect();
            write_wav(&p, &samples, 16_000).unwrap();
            (format!("w{i}"), p)
        })
        .collect();
    let cfg = MfccConfig {
        delta_order: 2,
        ..MfccConfig::default()
    };
    let feats_a = extract_batch(&items, &cfg, Exec::default()).unwrap();
    let feats_b = extract_batch(&items, &cfg, Exec::default()).unwrap();
    let bytes = |f: &[uws::corpus::FrameSequence], tag: &str| -> Vec<Vec<u8>> {
        f.iter()
            .map(|s| {
                let p = wav_dir.join(format!("{}-{tag}.uwsf", s.utterance_id));
                uws::corpus::write_features(s, &p).unwrap();
                std::fs::read(p).unwrap()
            })
            .collect()
    };
    if bytes(&feats_a, "a") != bytes(&feats_b, "b") {
        differing.push("features".into());
    }

    check(
        differing.is_empty(),
        format!(
            "{} pipeline conditions and MFCC extraction run twice, {}",
            conditions.len(),
            if differing.is_empty() {
                "all artifacts byte-identical".to_string()
            } else {
                format!("differing: {differing:?}")
            }
        ),
    )
}

fn crp_consistency() -> Outcome {
    let corpus = generate_synthetic(&regression_spec(150)).unwrap();
    let cfg = DpsegConfig {
        n_sweeps: 60,
        seed: 4,
        ..DpsegConfig::default()
    };
    let (mismatches, worst) = common::crp_consistency(&corpus.gold_units, &cfg, cfg.n_sweeps);
    check(
        mismatches == 0 && worst < 1e-8,
        format!(
            "{} sweeps, table mismatches {mismatches}, max |joint diff| {worst:.2e}",
            cfg.n_sweeps
        ),
    )
}

fn run(number: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        check(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {number} {name}: {} ({}) [{:.1} s]",
        if outcome.pass { "PASS" } else { "FAIL" },
        outcome.detail,
        started.elapsed().as_secs_f64()
    );
    outcome.pass
}

fn main() {
    let list_only = std::env::args().any(|a| a == "--list");
    if list_only {
        println!("acceptance: test");
        return;
    }
    let mut results = vec![
        run(1, "oracle equivalence", oracle_equivalence),
        run(2, "monotone ELBO", monotone_elbo),
        run(3, "gradient checks", gradient_checks),
    ];
    let regression = catch_unwind(regression_runs);
    match &regression {
        Ok(runs) => {
            results.push(run(4, "recoverability", || recoverability(runs)));
            results.push(run(5, "paper trends", || paper_trends(runs)));
        }
        Err(_) => {
            results.push(run(4, "recoverability", || {
                check(false, "regression runs panicked")
            }));
            results.push(run(5, "paper trends", || {
                check(false, "regression runs panicked")
            }));
        }
    }
    results.push(run(6, "metric correctness", metric_correctness));
    results.push(run(7, "determinism", determinism));
    results.push(run(8, "CRP consistency", crp_consistency));
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
