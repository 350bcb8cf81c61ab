use std::path::{Path, PathBuf};
use std::process::Command;

use drgrade_cli::{dispatch, resolve_config, Source, TrainFlags};
use drgrade_core::datapipe::synthetic::write_synthetic_tree;
use drgrade_core::trainer::TrainConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drgrade"))
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["drgrade", "--quiet"];
    argv.extend_from_slice(args);
    dispatch(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 10] = [
    "--stage-widths",
    "4,8",
    "--reduced-channels",
    "8",
    "--k",
    "2",
    "--input-size",
    "16",
    "--batch-size",
    "4",
];

#[test]
fn help_exits_zero() {
    assert_eq!(dispatch(["drgrade", "--help"]), 0);
    for sub in ["preprocess", "train", "eval", "ablate", "explain"] {
        assert_eq!(dispatch(["drgrade", sub, "--help"]), 0, "{sub}");
    }
}

#[test]
fn unknown_subcommand_exits_one() {
    assert_eq!(dispatch(["drgrade", "fit"]), 1);
    assert_eq!(dispatch(["drgrade"]), 1);
}

#[test]
fn missing_manifest_names_the_flag() {
    let out = bin().args(["train", "--out-dir", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--manifest"));
}

#[test]
fn defaults_resolve_without_file_or_flags() {
    let rc = resolve_config(&TrainFlags::default().to_table(None), None).unwrap();
    assert_eq!(rc.train, TrainConfig::default());
    assert!(rc.provenance.values().all(|&p| p == Source::Default));
    let t = &rc.train;
    assert_eq!((t.epochs, t.batch_size, t.k, t.lr_phase1, t.lr_phase2), (40, 16, 5, 5e-3, 8e-5));
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "epochs = 70\nbatch_size = 8\n").unwrap();
    let flags = TrainFlags { epochs: Some(10), ..TrainFlags::default() };
    let rc = resolve_config(&flags.to_table(Some(4)), Some(&file)).unwrap();
    assert_eq!((rc.train.epochs, rc.train.batch_size, rc.train.seed), (10, 8, 4));
    assert_eq!(rc.provenance["epochs"], Source::Flag);
    assert_eq!(rc.provenance["batch_size"], Source::File);
    assert_eq!(rc.provenance["seed"], Source::Flag);
    assert_eq!(rc.provenance["k"], Source::Default);
}

#[test]
fn unknown_config_key_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "epochs = 3\nmomentum = 0.9\n").unwrap();
    let out = bin().args(["train", "--print-config", "--config", s(&file)]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
}

#[test]
fn invalid_config_value_exits_one() {
    let out = bin().args(["train", "--print-config", "--plateau-factor", "1.5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn printed_config_reads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--seed", "3", "train", "--print-config", "--epochs", "7", "--attention", "cab_only"])
        .args(["--lr-phase1", "0.0123", "--stage-widths", "8,16"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let file = dir.path().join("resolved.toml");
    std::fs::write(&file, &out.stdout).unwrap();
    let first = resolve_config(
        &TrainFlags {
            epochs: Some(7),
            attention: Some("cab_only".parse().unwrap()),
            lr_phase1: Some(0.0123),
            stage_widths: Some(vec![8, 16]),
            ..TrainFlags::default()
        }
        .to_table(Some(3)),
        None,
    )
    .unwrap();
    let again = resolve_config(&TrainFlags::default().to_table(None), Some(&file)).unwrap();
    assert_eq!(again.train, first.train);
    assert!(again.provenance.values().all(|&p| p == Source::File));
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn train_run(root: &Path, manifest: &Path, out: &str) -> PathBuf {
    let out = root.join(out);
    let mut args = vec!["--seed", "5", "train", "--manifest", s(manifest), "--out-dir", s(&out), "--epochs", "2"];
    args.extend(["--phase1-epochs", "1"]);
    args.extend(TINY);
    assert_eq!(run(&args), 0);
    out
}

#[test]
fn full_pipeline_on_a_small_synthetic_set() {
    let root = tempfile::tempdir().unwrap();
    let raw = root.path().join("raw");
    write_synthetic_tree(&raw, [5; 5], 32, 11).unwrap();
    let prep = root.path().join("prep");
    assert_eq!(run(&["preprocess", "--input-dir", s(&raw), "--out-dir", s(&prep), "--resize", "16"]), 0);
    let manifest = prep.join("manifest.csv");
    assert!(manifest.exists());
    assert_eq!(std::fs::read_dir(prep.join("images")).unwrap().count(), 25);

    let trained = train_run(root.path(), &manifest, "run");
    assert_eq!(
        files_in(&trained),
        ["best.ckpt", "config.toml", "epochs.csv", "final.ckpt", "model.toml", "test_report.toml", "val_report.toml"]
    );
    let again = train_run(root.path(), &manifest, "run2");
    for f in ["best.ckpt", "final.ckpt", "val_report.toml", "test_report.toml", "epochs.csv"] {
        assert_eq!(std::fs::read(trained.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    let ckpt = trained.join("best.ckpt");
    let eval_dir = root.path().join("eval");
    assert_eq!(run(&["eval", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--out-dir", s(&eval_dir)]), 0);
    assert_eq!(
        std::fs::read_to_string(eval_dir.join("report.toml")).unwrap(),
        std::fs::read_to_string(trained.join("test_report.toml")).unwrap()
    );

    let explain_dir = root.path().join("explain");
    let args = ["explain", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--limit", "2", "--out-dir", s(&explain_dir)];
    assert_eq!(run(&args), 0);
    assert_eq!(files_in(&explain_dir).len(), 8);
    let image = prep.join("images").join("00000_img_00000.png");
    let single = root.path().join("single");
    let args = ["explain", "--ckpt", s(&ckpt), "--image", s(&image), "--grade", "3", "--stages", "gab,cab", "--out-dir", s(&single)];
    assert_eq!(run(&args), 0);
    assert_eq!(files_in(&single), ["00000_img_00000.cab.png", "00000_img_00000.gab.png", "00000_img_00000.orig.png"]);

    let ablate_dir = root.path().join("ablate");
    let mut args = vec!["ablate", "--manifest", s(&manifest), "--out-dir", s(&ablate_dir), "--epochs", "1", "--modes", "baseline,gab_cab"];
    args.extend(TINY);
    assert_eq!(run(&args), 0);
    let csv = std::fs::read_to_string(ablate_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(ablate_dir.join("gab_cab.report.toml").exists());

    let mut top = files_in(root.path());
    top.sort();
    assert_eq!(top, ["ablate", "eval", "explain", "prep", "raw", "run", "run2", "single"]);
}

#[test]
fn runtime_and_input_errors_have_distinct_codes() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("nope.csv");
    let out = root.path().join("out");
    assert_eq!(run(&["train", "--manifest", s(&missing), "--out-dir", s(&out)]), 2);
    let empty = root.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(run(&["preprocess", "--input-dir", s(&empty), "--out-dir", s(&out)]), 1);
    let ckpt = root.path().join("x.ckpt");
    assert_eq!(run(&["explain", "--ckpt", s(&ckpt), "--image", "a.png", "--out-dir", s(&out)]), 1);
    assert_eq!(run(&["explain", "--ckpt", s(&ckpt), "--image", "a.png", "--grade", "7", "--out-dir", s(&out)]), 1);
}

#[test]
fn preprocess_writes_to_an_explicit_manifest_path() {
    let root = tempfile::tempdir().unwrap();
    let raw = root.path().join("raw");
    write_synthetic_tree(&raw, [4; 5], 20, 2).unwrap();
    let manifest = root.path().join("data").join("set.csv");
    let args = ["preprocess", "--input-dir", s(&raw), "--out-manifest", s(&manifest), "--resize", "8", "--augment", "full"];
    assert_eq!(run(&args), 0);
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().count(), 1 + 20 * 5);
    assert_eq!(files_in(&root.path().join("data")), ["images", "set.csv"]);
}
