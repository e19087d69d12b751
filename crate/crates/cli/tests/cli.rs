use std::fs;
use std::path::Path;
use std::process::Command as Process;

use clap::CommandFactory;
use digitvox_cli::Cli;

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_digitvox"))
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["digitvox".into()];
    argv.extend(args.iter().map(Into::into));
    digitvox_cli::run(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Reads `key = value` lines of an echoed config.
fn echoed(dir: &Path) -> Vec<(String, String)> {
    fs::read_to_string(dir.join("config.txt"))
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once(" = ").unwrap();
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn lookup<'a>(cfg: &'a [(String, String)], key: &str) -> &'a str {
    &cfg.iter().find(|(k, _)| k == key).unwrap().1
}

#[test]
fn every_flag_is_documented() {
    let root = Cli::command();
    assert!(root.get_about().is_some());
    for arg in root.get_arguments() {
        assert!(arg.get_help().is_some() || arg.get_id() == "help" || arg.get_id() == "version", "--{}", arg.get_id());
    }
    for sub in root.get_subcommands() {
        assert!(sub.get_about().is_some(), "{}", sub.get_name());
        for arg in sub.get_arguments() {
            assert!(arg.get_help().is_some() || arg.get_id() == "help", "{} --{}", sub.get_name(), arg.get_id());
        }
    }
    Cli::command().debug_assert();
}

#[test]
fn help_and_usage_errors_exit_codes() {
    let help = bin().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8(help.stdout).unwrap();
    for name in ["synth", "features", "train", "embed", "enroll", "score", "eval", "fuse", "tsne"] {
        assert!(text.contains(name), "{name} missing from help");
    }
    assert_eq!(bin().arg("train").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["eval", "--scores"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["--workers", "0", "eval", "--scores", "x"]).output().unwrap().status.code(), Some(1));
}

#[test]
fn eval_without_targets_is_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.tsv");
    fs::write(&scores, "spk01\t0\t0.100000000\tnontarget\nspk01\t1\t0.200000000\tnontarget\n").unwrap();
    let out = bin().args(["eval", "--scores", p(&scores)]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no target trials"));

    let missing = bin().args(["eval", "--scores", p(&dir.path().join("absent.tsv"))]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));

    fs::write(&scores, "spk01\t0\t0.9\ttarget\nspk01\t1\t0.2\tnontarget\n").unwrap();
    let ok = bin().args(["eval", "--scores", p(&scores), "--name", "sys"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8(ok.stdout).unwrap();
    assert!(text.contains("sys\t0.0000\t0.000000\t1\t1"), "{text}");
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "# small corpus\nspeakers = 3\nsessions = 4\nenroll_sessions = 2\npassphrase_len = 3\n\
         nontarget_ratio = 2\nepochs = 4   # used by train, ignored here\n",
    )
    .unwrap();
    let out = dir.path().join("corpus");
    assert_eq!(run(&["synth", "--config", p(&cfg), "--out", p(&out), "--speakers", "2"]), 0);
    let eff = echoed(&out);
    assert_eq!(lookup(&eff, "speakers"), "2");
    assert_eq!(lookup(&eff, "sessions"), "4");
    assert_eq!(lookup(&eff, "seed"), "7");
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 2 * 4 * 10);

    fs::write(&cfg, "speakerz = 3\n").unwrap();
    assert_eq!(run(&["synth", "--config", p(&cfg), "--out", p(&out)]), 1);
    fs::write(&cfg, "epochs = many\n").unwrap();
    assert_eq!(run(&["synth", "--config", p(&cfg), "--out", p(&out)]), 1);
    fs::write(&cfg, "speakers = 1\n").unwrap();
    assert_eq!(run(&["synth", "--config", p(&cfg), "--out", p(&out)]), 1);
    assert_eq!(run(&["synth", "--config", p(&dir.path().join("none.cfg")), "--out", p(&out)]), 1);
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let corpus = d("corpus");
    assert_eq!(
        run(&[
            "synth", "--out", p(&corpus), "--speakers", "4", "--sessions", "5", "--enroll-sessions", "3",
            "--passphrase-len", "3", "--nontarget-ratio", "3",
        ]),
        0
    );
    let manifest = corpus.join("manifest.jsonl");
    let train_manifest = corpus.join("train.jsonl");
    assert_eq!(run(&["--workers", "3", "features", "--manifest", p(&manifest), "--out", p(&d("feats"))]), 0);
    assert!(d("feats").join("spk00_s0_d0.vdft").exists());
    assert_eq!(
        run(&[
            "train", "--manifest", p(&train_manifest), "--features", p(&d("feats")), "--width", "1/8",
            "--epochs", "2", "--out", p(&d("model")),
        ]),
        0
    );
    let log = fs::read_to_string(d("model").join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert_eq!(log.lines().next().unwrap().split('\t').count(), 5);
    let summary = fs::read_to_string(d("model").join("summary.txt")).unwrap();
    assert!(summary.contains("classes = 40"), "{summary}");
    assert_eq!(
        run(&[
            "--workers", "2", "embed", "--checkpoint", p(&d("model").join("model.ckpt")), "--manifest",
            p(&manifest), "--features", p(&d("feats")), "--out", p(&d("emb")),
        ]),
        0
    );
    let emb = d("emb").join("embeddings.vdem");
    assert_eq!(
        run(&["enroll", "--embeddings", p(&emb), "--enrollment", p(&corpus.join("enroll.tsv")), "--out", p(&d("enr"))]),
        0
    );
    assert_eq!(
        run(&[
            "score", "--models", p(&d("enr").join("models.tsv")), "--embeddings", p(&emb), "--trials",
            p(&corpus.join("trials.tsv")), "--out", p(&d("sc")),
        ]),
        0
    );
    let scores = d("sc").join("scores.tsv");
    let n_trials = fs::read_to_string(corpus.join("trials.tsv")).unwrap().lines().count();
    assert_eq!(fs::read_to_string(&scores).unwrap().lines().count(), n_trials);
    assert_eq!(run(&["eval", "--scores", p(&scores), "--out", p(&d("ev"))]), 0);
    assert_eq!(fs::read_to_string(d("ev").join("report.tsv")).unwrap().lines().count(), 2);
    assert!(d("ev").join("det.tsv").exists());
    assert_eq!(
        run(&["fuse", "--train-scores", p(&scores), "--train-scores", p(&scores), "--out", p(&d("fu"))]),
        0
    );
    let fusion: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("fu").join("fusion.json")).unwrap()).unwrap();
    assert_eq!(fusion["weights"].as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(d("fu").join("fused.tsv")).unwrap().lines().count(), n_trials);
    assert_eq!(
        run(&[
            "tsne", "--embeddings", p(&emb), "--manifest", p(&manifest), "--speakers", "2", "--perplexity", "10",
            "--iterations", "150", "--out", p(&d("ts")),
        ]),
        0
    );
    let tsv = fs::read_to_string(d("ts").join("tsne.tsv")).unwrap();
    assert_eq!(tsv.lines().filter(|l| l.contains("spk0")).count(), 2 * 5 * 10);
    assert!(fs::read_to_string(d("ts").join("tsne.svg")).unwrap().starts_with("<svg"));

    // Mismatched fusion inputs are rejected as invalid.
    fs::write(d("short.tsv"), "spk00\t0\t0.5\ttarget\n").unwrap();
    assert_eq!(
        run(&["fuse", "--train-scores", p(&scores), "--train-scores", p(&d("short.tsv")), "--out", p(&d("fu2"))]),
        1
    );
}
