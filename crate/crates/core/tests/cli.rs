//! CLI contract tests: help coverage, error categories, exit codes and the
//! effective-seed banner. These run without any trained artifacts.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_voiceshield")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn voiceshield")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SUBCOMMANDS: &[&str] = &[
    "gen-corpus",
    "train",
    "calibrate",
    "protect",
    "enhance",
    "synthesize",
    "verify",
    "evaluate",
];

const GLOBAL_FLAGS: &[&str] = &["--config", "--seed", "--workers", "--trace-dir"];

fn subcommand_flags(cmd: &str) -> &'static [&'static str] {
    match cmd {
        "protect" => &["--input", "--output", "--mode"],
        "enhance" => &["--input", "--output", "--method"],
        "synthesize" => &["--content", "--stolen-from", "--output", "--encoder"],
        "verify" => &["--profile", "--input", "--encoder"],
        _ => &[],
    }
}

/// Every documented flag in a help page, i.e. tokens of the form `--name`
/// at the start of an option line.
fn documented_flags(help: &str) -> Vec<String> {
    let mut flags = Vec::new();
    for line in help.lines() {
        let t = line.trim_start();
        let t = t.strip_prefix("-h, ").unwrap_or(t);
        let t = t.strip_prefix("-V, ").unwrap_or(t);
        if let Some(rest) = t.strip_prefix("--") {
            let name: String = rest
                .chars()
                .take_while(|c| c.is_ascii_alphanumeric() || *c == '-')
                .collect();
            if !name.is_empty() {
                flags.push(format!("--{name}"));
            }
        }
    }
    flags.sort();
    flags.dedup();
    flags
}

#[test]
fn top_level_help_lists_every_subcommand_and_global_flag() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let help = stdout(&out);
    for sub in SUBCOMMANDS {
        assert!(help.contains(sub), "top-level help missing subcommand {sub}");
    }
    for flag in GLOBAL_FLAGS {
        assert!(help.contains(flag), "top-level help missing global flag {flag}");
    }
}

#[test]
fn subcommand_help_covers_all_flags_and_nothing_undocumented() {
    for sub in SUBCOMMANDS {
        let out = run(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help failed");
        let help = stdout(&out);
        let documented = documented_flags(&help);
        let mut expected: Vec<String> = GLOBAL_FLAGS
            .iter()
            .chain(subcommand_flags(sub).iter())
            .map(|s| s.to_string())
            .collect();
        expected.push("--help".into());
        expected.sort();
        for f in &expected {
            assert!(
                documented.contains(f),
                "{sub} --help missing flag {f}; documented: {documented:?}"
            );
        }
        for f in &documented {
            assert!(
                expected.contains(f),
                "{sub} --help documents unexpected flag {f}"
            );
        }
    }
}

#[test]
fn unknown_config_key_exits_2_with_config_category() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no.such.key=1\n").unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    let line = err.lines().last().unwrap_or("");
    assert!(
        line.starts_with("error[config]:"),
        "expected one machine-parseable error[config] line, got: {err}"
    );
}

#[test]
fn malformed_config_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "defense.max_iters=notanumber\n").unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("error[config]:"));
}

#[test]
fn missing_artifacts_exit_3_with_artifact_category() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "paths.corpus_dir={0}/corpus\npaths.model_dir={0}/models\npaths.report_dir={0}/reports\n",
            dir.path().display()
        ),
    )
    .unwrap();
    // A wav exists but no models were trained.
    let wav = dir.path().join("x.wav");
    write_test_wav(&wav);
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "protect",
        "--input",
        wav.to_str().unwrap(),
        "--output",
        dir.path().join("y.wav").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("error[artifact]:"));
}

#[test]
fn every_command_prints_effective_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "paths.corpus_dir={0}/corpus\npaths.model_dir={0}/models\npaths.report_dir={0}/reports\ncorpus.speakers=2\ncorpus.utterances_per_speaker=4\ncorpus.duration_s=0.3\n",
            dir.path().display()
        ),
    )
    .unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "--seed", "77", "gen-corpus"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(
        stdout(&out).lines().any(|l| l == "seed: 77"),
        "missing seed banner in: {}",
        stdout(&out)
    );
}

#[test]
fn gen_corpus_is_deterministic_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "paths.corpus_dir={0}/corpus\npaths.model_dir={0}/models\npaths.report_dir={0}/reports\ncorpus.speakers=2\ncorpus.utterances_per_speaker=4\ncorpus.duration_s=0.3\n",
            dir.path().display()
        ),
    )
    .unwrap();
    let args = ["--config", cfg.to_str().unwrap(), "gen-corpus"];
    assert!(run(&args).status.success());
    let manifest = dir.path().join("corpus/manifest.txt");
    let first = std::fs::read(&manifest).unwrap();
    let wav = dir.path().join("corpus/spk00/utt00.wav");
    let first_wav = std::fs::read(&wav).unwrap();
    assert!(run(&args).status.success());
    assert_eq!(std::fs::read(&manifest).unwrap(), first);
    assert_eq!(std::fs::read(&wav).unwrap(), first_wav);
}

fn write_test_wav(path: &Path) {
    // Minimal 16 kHz mono sine written through the crate's own writer.
    let samples: Vec<f64> = (0..4800)
        .map(|i| 0.3 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 16000.0).sin())
        .collect();
    let wav = voiceshield::signal::Waveform::new(samples, 16000).unwrap();
    voiceshield::signal::write_wav(path, &wav).unwrap();
}
