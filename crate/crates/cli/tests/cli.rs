use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn uwspipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uwspipe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize) -> PathBuf {
    let out = uwspipe(&[
        "synth",
        "--out-dir",
        s(dir),
        "--units",
        "4",
        "--dim",
        "3",
        "--lexicon",
        "012,31,2303",
        "--utterances",
        &n.to_string(),
        "--seed",
        "5",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    dir.join("manifest.json")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn run_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    synth(&tmp.path().join("corpus"), 20);
    let cfg = write_config(
        tmp.path(),
        r#"{"manifest": "corpus/manifest.json", "output_dir": "run", "discretizer": "gold",
            "dpseg": {"n_sweeps": 20}}"#,
    );
    let out = uwspipe(&["run", "--config", s(&cfg)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["boundary_f"].as_f64().unwrap() > 0.5);

    let out2 = uwspipe(&[
        "run",
        "--config",
        s(&cfg),
        "--output-dir",
        s(&tmp.path().join("sil")),
        "--set",
        "post=plus_sil",
    ]);
    assert!(
        out2.status.success(),
        "{}",
        String::from_utf8_lossy(&out2.stderr)
    );

    let json = tmp.path().join("table.json");
    let rep = uwspipe(&[
        "report",
        "--runs",
        s(&tmp.path().join("run")),
        s(&tmp.path().join("sil")),
        "--json",
        s(&json),
    ]);
    assert!(rep.status.success());
    let md = String::from_utf8(rep.stdout).unwrap();
    assert!(md.contains("gold RAW") && md.contains("gold +SIL"), "{md}");
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("corpus"), 3);
    let bad = write_config(
        tmp.path(),
        r#"{"manifest": "corpus/manifest.json", "output_dir": "run", "bogus": 1}"#,
    );
    assert_eq!(
        uwspipe(&["run", "--config", s(&bad)]).status.code(),
        Some(2)
    );

    let cfg = write_config(
        tmp.path(),
        r#"{"manifest": "corpus/manifest.json", "output_dir": "run"}"#,
    );
    assert_eq!(
        uwspipe(&["run", "--config", s(&cfg), "--set", "dpseg.alpha0=-1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        uwspipe(&["run", "--config", s(&cfg), "--set", "uws=nonsense"])
            .status
            .code(),
        Some(2)
    );

    let text = std::fs::read_to_string(&m).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for u in v["utterances"].as_array_mut().unwrap() {
        u.as_object_mut().unwrap().remove("translation");
    }
    std::fs::write(&m, v.to_string()).unwrap();
    let out = uwspipe(&["run", "--config", s(&cfg), "--set", "uws=align"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("translation"));
}

#[test]
fn stage_failures_exit_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cdir = tmp.path().join("corpus");
    synth(&cdir, 3);
    let feat = std::fs::read_dir(cdir.join("feats"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    std::fs::write(&feat, b"not a feature file").unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"manifest": "corpus/manifest.json", "output_dir": "run"}"#,
    );
    let out = uwspipe(&["run", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("discretize"), "{err}");
    let id = feat.file_stem().unwrap().to_str().unwrap();
    assert!(err.contains(id), "{err}");
}

#[test]
fn stepwise_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let m = synth(&t.join("corpus"), 15);
    let aud_cfg = t.join("aud.json");
    std::fs::write(&aud_cfg, r#"{"n_components": 1}"#).unwrap();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "aud",
            "train",
            "--model",
            "hmm",
            "--manifest",
            s(&m),
            "--units",
            "6",
            "--iters",
            "3",
            "--seed",
            "2",
            "--config",
            s(&aud_cfg),
            "--out",
            s(&t.join("m.aud")),
        ],
        vec![
            "aud",
            "decode",
            "--manifest",
            s(&m),
            "--model",
            s(&t.join("m.aud")),
            "--out",
            s(&t.join("raw.txt")),
        ],
        vec![
            "units",
            "post",
            "--in",
            s(&t.join("raw.txt")),
            "--manifest",
            s(&m),
            "--mode",
            "plus_sil",
            "--out",
            s(&t.join("post.txt")),
        ],
        vec![
            "uws",
            "dpseg",
            "--in",
            s(&t.join("post.txt")),
            "--out",
            s(&t.join("seg.txt")),
            "--seed",
            "1",
        ],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for step in &steps {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        let out = uwspipe(&args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let stats = uwspipe(&["units", "stats", "--in", s(&t.join("post.txt"))]);
    let v: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(v["n_utterances"], 15);
    let ev = uwspipe(&[
        "eval",
        "--hyp",
        s(&t.join("seg.txt")),
        "--gold",
        s(&t.join("corpus/gold_words.txt")),
    ]);
    assert!(
        ev.status.success(),
        "{}",
        String::from_utf8_lossy(&ev.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&ev.stdout).unwrap();
    let f = v["boundary"]["fscore"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f));
}

#[test]
fn features_from_audio_update_the_manifest() {
    use uws::corpus::{read_features, save_manifest, CorpusManifest, Utterance};
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let mut manifest = CorpusManifest::new("tones");
    for (i, freq) in [220.0, 440.0].into_iter().enumerate() {
        let samples: Vec<f64> = (0..8000)
            .map(|n| 0.3 * (2.0 * std::f64::consts::PI * freq * n as f64 / 16_000.0).sin())
            .collect();
        let wav = t.join(format!("u{i}.wav"));
        uws::features::write_wav(&wav, &samples, 16_000).unwrap();
        let mut u = Utterance::new(format!("u{i}"));
        u.audio_path = Some(wav);
        manifest.utterances.push(u);
    }
    let m = t.join("manifest.json");
    save_manifest(&manifest, &m).unwrap();
    let out = uwspipe(&[
        "features",
        "--manifest",
        s(&m),
        "--out-dir",
        s(&t.join("feats")),
        "--deltas",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let updated = uws::corpus::load_manifest(t.join("feats/manifest.json")).unwrap();
    let f = read_features(
        updated.utterances[1].feature_path.as_ref().unwrap(),
        updated.hop_s(),
    )
    .unwrap();
    assert_eq!(f.dim, 39);
    assert_eq!(f.utterance_id, "u1");
}

#[test]
fn vq_train_and_decode() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let m = synth(&t.join("corpus"), 6);
    let model = t.join("m.vq");
    let out = uwspipe(&[
        "vq",
        "train",
        "--manifest",
        s(&m),
        "--units",
        "4",
        "--epochs",
        "2",
        "--seed",
        "1",
        "--out",
        s(&model),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = uwspipe(&[
        "vq",
        "decode",
        "--manifest",
        s(&m),
        "--model",
        s(&model),
        "--out-dir",
        s(&t.join("dec")),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let frames = uws::corpus::textfmt::read_frame_labels(t.join("dec/frames.txt")).unwrap();
    let units = uws::corpus::textfmt::read_unit_file(t.join("dec/units.txt")).unwrap();
    assert_eq!(frames.len(), 6);
    for (f, u) in frames.iter().zip(&units) {
        assert!(f.labels.iter().all(|l| l.parse::<usize>().unwrap() < 4));
        assert!(u.len() <= f.labels.len());
    }
}
