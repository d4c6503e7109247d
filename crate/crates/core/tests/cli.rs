use std::path::Path;
use std::process::{Command, Output};

fn semg2v(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semg2v")).args(args).output().unwrap()
}

fn small(workdir: &Path) -> Vec<String> {
    [
        format!("workdir={}", workdir.display()),
        "synth_utterances=10".into(),
        "d_model=8".into(),
        "hidden_units=32".into(),
        "heads=2".into(),
        "enc_layers=1".into(),
        "dec_layers=1".into(),
        "postnet_channels=8".into(),
        "durpred_channels=8".into(),
        "epochs=2".into(),
        "batch_size=4".into(),
        "vocoder_iters=2".into(),
    ]
    .into_iter()
    .flat_map(|kv| ["--set".to_string(), kv])
    .collect()
}

fn run(args: Vec<String>) -> Output {
    semg2v(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn bad_config_exits_with_2() {
    let out = semg2v(&["config", "--set", "epochs=-1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = semg2v(&["config", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn missing_upstream_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run".to_string(), "train".to_string()];
    args.extend(small(dir.path()));
    assert_eq!(run(args).status.code(), Some(3));
}

#[test]
fn rerun_skips_and_config_change_invalidates_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run".to_string(), "all".to_string()];
    args.extend(small(dir.path()));
    let first = run(args.clone());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(dir.path().join("evaluate/metrics.csv").exists());

    let again = String::from_utf8(run(args.clone()).stdout).unwrap();
    assert_eq!(again.matches("skipped").count(), 7, "{again}");

    // a vocoder change leaves training cached but reruns synthesis
    args.extend(["--set".to_string(), "vocoder_iters=3".to_string()]);
    let changed = String::from_utf8(run(args).stdout).unwrap();
    let state = |stage: &str| changed.lines().find(|l| l.starts_with(stage)).unwrap().to_string();
    assert!(state("train").contains("skipped"), "{changed}");
    assert!(state("infer").contains("done"), "{changed}");
    assert!(state("evaluate").contains("done"), "{changed}");
}

#[test]
fn infer_command_writes_wavs() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run".to_string(), "all".to_string()];
    args.extend(small(dir.path()));
    assert!(run(args).status.success());
    let corpus = dir.path().join("synth-data");
    let a = corpus.join("utt0000/emg_silent");
    let b = corpus.join("utt0001/emg_silent.json");
    let out_dir = dir.path().join("wavs");
    let out = semg2v(&[
        "infer",
        "--checkpoint",
        dir.path().join("train/checkpoints/best.ckpt").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--iters",
        "2",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for id in ["utt0000", "utt0001"] {
        assert!(out_dir.join(format!("{id}.wav")).exists());
    }
    assert!(out_dir.join("durations.txt").exists());

    let missing = semg2v(&[
        "infer",
        "--checkpoint",
        dir.path().join("train/checkpoints/nope.ckpt").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        a.to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(3));
}
