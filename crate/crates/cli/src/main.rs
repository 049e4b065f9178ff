//! `uwspipe`: discretize speech, segment the units into words and score the
//! result.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 when a stage
//! fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use uws::align::{load_alignments, segment_from_alignment};
use uws::aud::{
    fit_hier_subspace, fit_subspace, train_hmm, train_hshmm, train_shmm, AudConfig, AudModel,
    LabeledCorpus, SubspaceConfig, SubspaceFile,
};
use uws::corpus::textfmt::{
    read_segmentation_file, read_unit_file, write_frame_labels, write_segmentation_file,
    write_unit_file,
};
use uws::corpus::{
    generate_synthetic, load_manifest, save_manifest, write_features, CorpusManifest, SyntheticSpec,
};
use uws::dpseg::{gibbs_segment, DpsegConfig};
use uws::eval::{evaluate, Plane, DEFAULT_TOLERANCE_S};
use uws::features::MfccConfig;
use uws::pipeline::{
    labeled_corpus_from_manifest, load_corpus_features, render_report, run_pipeline, PipelineConfig,
};
use uws::seq::UnitSequence;
use uws::units::{
    bpe_apply, bpe_learn, merge_windows, post_process, unit_stats, PostMode, DEFAULT_MAX_LEN,
};
use uws::vq::{vqvae_train, VqVaeConfig, VqVaeModel};
use uws::{Exec, UwsError};

#[derive(Parser)]
#[command(
    name = "uwspipe",
    version,
    about = "Unsupervised word segmentation from speech"
)]
struct Cli {
    /// Disable data parallelism.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline from a JSON config.
    Run(RunArgs),
    /// Tabulate boundary F over finished runs.
    Report(ReportArgs),
    /// Write a synthetic corpus with gold units and words.
    Synth(SynthArgs),
    /// Extract MFCC features for every utterance with audio.
    Features(FeaturesArgs),
    /// VQ-VAE discretizer.
    #[command(subcommand)]
    Vq(VqCommand),
    /// Bayesian phone-loop discretizers.
    #[command(subcommand)]
    Aud(AudCommand),
    /// Unit post-processing and statistics.
    #[command(subcommand)]
    Units(UnitsCommand),
    /// Word segmentation of unit sequences.
    #[command(subcommand)]
    Uws(UwsCommand),
    /// Score a segmentation against gold words.
    Eval(EvalArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config field, e.g. `--set dpseg.alpha0=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    units: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    /// Comma-separated words over unit digits.
    #[arg(long, default_value = "012,34,1403,230,4121")]
    lexicon: String,
    #[arg(long, default_value_t = 500)]
    utterances: usize,
    #[arg(long, default_value_t = 0.2)]
    silence_prob: f64,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// MFCC settings as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Append delta and delta-delta coefficients.
    #[arg(long)]
    deltas: bool,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// MFCC settings used for utterances given as audio.
    #[arg(long)]
    features_config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum VqCommand {
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        units: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Writes `frames.txt` (one label per frame) and `units.txt`.
    Decode {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AudKindArg {
    Hmm,
    Shmm,
    Hshmm,
}

#[derive(Subcommand)]
enum AudCommand {
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long = "model", alias = "kind", value_enum, default_value = "hmm")]
        kind: AudKindArg,
        #[arg(long)]
        units: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Subspace file for shmm / hshmm.
        #[arg(long)]
        subspace: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    Decode {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a unit subspace on source corpora with gold units.
    Subspace {
        #[arg(long, num_args = 1.., required = true)]
        sources: Vec<PathBuf>,
        /// Fit the hierarchical (per-language) variant.
        #[arg(long)]
        hier: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        features_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum UnitsCommand {
    Post {
        #[arg(long = "in", alias = "input")]
        input: PathBuf,
        /// Manifest with the annotated silences.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "raw")]
        mode: PostMode,
        #[arg(long)]
        bpe_vocab: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    Stats {
        #[arg(long = "in", alias = "input")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
        /// Also write the statistics as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum UwsCommand {
    Dpseg {
        #[arg(long = "in", alias = "input")]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        alpha0: Option<f64>,
        #[arg(long)]
        pb: Option<f64>,
        #[arg(long)]
        sweeps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    Align {
        #[arg(long = "units", alias = "in")]
        input: PathBuf,
        #[arg(long)]
        alignments: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE_S * 1000.0)]
    tolerance_ms: f64,
    /// Score token positions instead of times.
    #[arg(long)]
    symbolic: bool,
    /// Also write the full report, including per-utterance counts.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Marks failures that stem from the configuration rather than a stage.
#[derive(Debug)]
struct ConfigFailure;

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("invalid configuration")
    }
}

impl std::error::Error for ConfigFailure {}

fn config_err(e: impl Into<anyhow::Error>) -> anyhow::Error {
    e.into().context(ConfigFailure)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|c| {
        c.is::<ConfigFailure>() || matches!(c.downcast_ref::<UwsError>(), Some(UwsError::Config(_)))
    });
    if config {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match dispatch(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(config_err)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(
    args: &CorpusArgs,
    exec: Exec,
) -> Result<(CorpusManifest, Vec<uws::corpus::FrameSequence>)> {
    let mfcc: MfccConfig = read_config(args.features_config.as_deref())?;
    let manifest = load_manifest(&args.manifest)?;
    let features = load_corpus_features(&manifest, &mfcc, exec, None)?;
    Ok((manifest, features))
}

fn dispatch(command: Command, exec: Exec) -> Result<()> {
    match command {
        Command::Run(a) => run(a, exec),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
        Command::Features(a) => features(a, exec),
        Command::Vq(c) => vq(c, exec),
        Command::Aud(c) => aud(c, exec),
        Command::Units(c) => units(c),
        Command::Uws(c) => segment(c),
        Command::Eval(a) => eval(a),
    }
}

fn run(a: RunArgs, exec: Exec) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config).map_err(config_err)?;
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    for o in &a.overrides {
        cfg.set_override(o).map_err(config_err)?;
    }
    cfg.validate().map_err(config_err)?;
    let report = run_pipeline(&cfg, exec)?;
    let summary = serde_json::json!({
        "output_dir": cfg.output_dir,
        "condition": report.condition,
        "boundary_f": report.boundary_f(),
        "config_sha256": report.provenance.config_sha256,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let (markdown, table) = render_report(&a.runs)?;
    print!("{markdown}");
    if let Some(p) = a.json {
        write_json(&p, &table)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let words: Vec<&str> = a
        .lexicon
        .split(',')
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .collect();
    let mut spec = SyntheticSpec::new(a.units, a.dim, &words, a.utterances, a.seed);
    spec.silence_prob = a.silence_prob;
    spec.validate().map_err(config_err)?;
    let corpus = generate_synthetic(&spec)?;
    let manifest = corpus.write_to_dir(&a.out_dir)?;
    println!("{}", manifest.display());
    Ok(())
}

/// Extracts features from audio and writes them next to a manifest that
/// points at them.
fn features(a: FeaturesArgs, exec: Exec) -> Result<()> {
    let mut mfcc: MfccConfig = read_config(a.config.as_deref())?;
    if a.deltas {
        mfcc.delta_order = 2;
    }
    mfcc.validate().map_err(config_err)?;
    let mut manifest = load_manifest(&a.manifest)?;
    if let Some(u) = manifest.utterances.iter().find(|u| u.audio_path.is_none()) {
        return Err(config_err(anyhow!("utterance {} has no audio", u.id)));
    }
    for u in &mut manifest.utterances {
        u.feature_path = None;
    }
    let feats = load_corpus_features(&manifest, &mfcc, exec, None)?;
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (u, f) in manifest.utterances.iter_mut().zip(&feats) {
        let name = PathBuf::from(format!("{}.uwsf", f.utterance_id));
        write_features(f, a.out_dir.join(&name))?;
        u.feature_path = Some(name);
    }
    manifest.frame_rate_hz = 1.0 / mfcc.hop_s;
    save_manifest(&manifest, a.out_dir.join("manifest.json"))?;
    log::info!("wrote {} feature files", feats.len());
    Ok(())
}

fn vq(c: VqCommand, exec: Exec) -> Result<()> {
    match c {
        VqCommand::Train {
            corpus,
            config,
            units,
            epochs,
            seed,
            out,
            trace,
        } => {
            let mut cfg: VqVaeConfig = read_config(config.as_deref())?;
            cfg.units = units.unwrap_or(cfg.units);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let (_, feats) = load_corpus(&corpus, exec)?;
            let (model, tr) = vqvae_train(&feats, &cfg, exec)?;
            model.save(&out)?;
            if let Some(p) = trace {
                write_json(&p, &tr)?;
            }
        }
        VqCommand::Decode {
            corpus,
            model,
            out_dir,
        } => {
            let model = VqVaeModel::load(&model)?;
            let (_, feats) = load_corpus(&corpus, exec)?;
            let frames = exec.map(&feats, |f| model.decode_units(f));
            let seqs = frames
                .iter()
                .zip(&feats)
                .map(|(l, f)| merge_windows(&l.utterance_id, &l.labels, f.hop_s))
                .collect::<uws::Result<Vec<_>>>()?;
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            write_frame_labels(&frames, out_dir.join("frames.txt"))?;
            write_unit_file(&seqs, out_dir.join("units.txt"), true)?;
        }
    }
    Ok(())
}

fn aud(c: AudCommand, exec: Exec) -> Result<()> {
    match c {
        AudCommand::Train {
            corpus,
            kind,
            units,
            iters,
            seed,
            subspace,
            config,
            out,
            trace,
        } => {
            let mut cfg: AudConfig = read_config(config.as_deref())?;
            cfg.units = units.unwrap_or(cfg.units);
            cfg.iterations = iters.unwrap_or(cfg.iterations);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let (manifest, feats) = load_corpus(&corpus, exec)?;
            let silences: Vec<_> = manifest
                .utterances
                .iter()
                .map(|u| u.silences.clone())
                .collect();
            let sub = match (kind, subspace) {
                (AudKindArg::Hmm, _) => None,
                (_, Some(p)) => Some(SubspaceFile::load(&p)?),
                (_, None) => {
                    return Err(config_err(anyhow!(
                        "--subspace is required for subspace models"
                    )))
                }
            };
            let (model, tr) = match (kind, sub) {
                (AudKindArg::Hmm, _) => train_hmm(&feats, &silences, &cfg, exec)?,
                (AudKindArg::Shmm, Some(SubspaceFile::Flat(s))) => {
                    train_shmm(&feats, &silences, &s, &cfg, exec)?
                }
                (AudKindArg::Hshmm, Some(SubspaceFile::Hier(h))) => {
                    train_hshmm(&feats, &silences, &h, &cfg, exec)?
                }
                _ => {
                    return Err(config_err(anyhow!(
                        "subspace file does not match the model kind"
                    )))
                }
            };
            model.save(&out)?;
            if let Some(p) = trace {
                write_json(&p, &tr)?;
            }
        }
        AudCommand::Decode { corpus, model, out } => {
            let model = AudModel::load(&model)?;
            let (_, feats) = load_corpus(&corpus, exec)?;
            write_unit_file(&model.decode_corpus(&feats, exec)?, &out, true)?;
        }
        AudCommand::Subspace {
            sources,
            hier,
            config,
            features_config,
            out,
        } => {
            let cfg: SubspaceConfig = read_config(config.as_deref())?;
            let mfcc: MfccConfig = read_config(features_config.as_deref())?;
            let corpora: Vec<LabeledCorpus> = sources
                .iter()
                .map(|p| labeled_corpus_from_manifest(p, &mfcc, exec))
                .collect::<uws::Result<_>>()?;
            let file = if hier {
                SubspaceFile::Hier(fit_hier_subspace(&corpora, &cfg, exec)?)
            } else {
                SubspaceFile::Flat(fit_subspace(&corpora, &cfg, exec)?)
            };
            file.save(&out)?;
        }
    }
    Ok(())
}

fn units(c: UnitsCommand) -> Result<()> {
    match c {
        UnitsCommand::Post {
            input,
            manifest,
            mode,
            bpe_vocab,
            out,
        } => {
            let manifest = load_manifest(&manifest)?;
            let seqs = read_unit_file(&input)?;
            let mut post = seqs
                .iter()
                .map(|s| {
                    let u = manifest.get(&s.utterance_id).ok_or_else(|| {
                        anyhow!("utterance {} is not in the manifest", s.utterance_id)
                    })?;
                    Ok(post_process(s, &u.silences, mode)?)
                })
                .collect::<Result<Vec<UnitSequence>>>()?;
            if let Some(v) = bpe_vocab {
                let model = bpe_learn(&post, v)?;
                post = post
                    .iter()
                    .map(|s| bpe_apply(s, &model))
                    .collect::<uws::Result<_>>()?;
            }
            write_unit_file(&post, &out, true)?;
        }
        UnitsCommand::Stats {
            input,
            max_len,
            report,
        } => {
            let stats = unit_stats(&read_unit_file(&input)?, max_len)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            if let Some(p) = report {
                write_json(&p, &stats)?;
            }
        }
    }
    Ok(())
}

fn segment(c: UwsCommand) -> Result<()> {
    match c {
        UwsCommand::Dpseg {
            input,
            config,
            alpha0,
            pb,
            sweeps,
            seed,
            out,
            trace,
        } => {
            let mut cfg: DpsegConfig = read_config(config.as_deref())?;
            cfg.alpha0 = alpha0.unwrap_or(cfg.alpha0);
            cfg.p_boundary = pb.unwrap_or(cfg.p_boundary);
            cfg.n_sweeps = sweeps.unwrap_or(cfg.n_sweeps);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.validate().map_err(config_err)?;
            let res = gibbs_segment(&read_unit_file(&input)?, &cfg)?;
            write_segmentation_file(&res.segmentations, &out, true)?;
            if let Some(p) = trace {
                write_json(&p, &res.trace)?;
            }
        }
        UwsCommand::Align {
            input,
            alignments,
            out,
        } => {
            let units = read_unit_file(&input)?;
            let mats = load_alignments(&alignments)?;
            let segs = units
                .iter()
                .map(|u| {
                    let m = mats
                        .iter()
                        .find(|m| m.utterance_id == u.utterance_id)
                        .ok_or_else(|| anyhow!("no alignment for utterance {}", u.utterance_id))?;
                    segment_from_alignment(u, m)
                        .with_context(|| format!("utterance {}", u.utterance_id))
                })
                .collect::<Result<Vec<_>>>()?;
            write_segmentation_file(&segs, &out, true)?;
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(a.tolerance_ms >= 0.0) {
        bail!(config_err(anyhow!("tolerance must be non-negative")));
    }
    let hyp = read_segmentation_file(&a.hyp)?;
    let gold = read_segmentation_file(&a.gold)?;
    let plane = if a.symbolic {
        Plane::Symbolic
    } else {
        Plane::Time
    };
    let report = evaluate(&hyp, &gold, plane, a.tolerance_ms / 1000.0)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    let mut v = serde_json::to_value(&report)?;
    if let Value::Object(m) = &mut v {
        if let Some(Value::Object(b)) = m.get_mut("boundary") {
            b.remove("per_utterance");
        }
    }
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}
