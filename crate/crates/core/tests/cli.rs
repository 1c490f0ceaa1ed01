//! End-to-end runs of the `mantis` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mantis_core::pipeline::io::{write_gray, write_rgb};
use mantis_core::pipeline::synth_dataset;

fn mantis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mantis")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A synthetic 64×64 tile pair with its label.
fn tile(dir: &Path) -> [PathBuf; 3] {
    let chip = synth_dataset(1, 64, 3).unwrap().remove(0);
    let paths = [dir.join("a.png"), dir.join("b.png"), dir.join("label.png")];
    write_rgb(&paths[0], &chip.t1).unwrap();
    write_rgb(&paths[1], &chip.t2).unwrap();
    write_gray(&paths[2], &chip.mask).unwrap();
    paths
}

#[test]
fn chip_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let [a, b, label] = tile(root);

    let data = root.join("data");
    let out = mantis(&[
        "chip", "--a", s(&a), "--b", s(&b), "--label", s(&label), "--out", s(&data), "--size", "16", "--stride",
        "16", "--split", "auto",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("train: 4 chips"), "{}", stdout(&out));
    for split in ["train", "val"] {
        for sub in ["A", "B", "label"] {
            assert!(fs::read_dir(data.join(split).join(sub)).unwrap().count() > 0);
        }
    }

    let config = root.join("config.json");
    fs::write(
        &config,
        r#"{"model": {"depth": 2, "nf": 4, "variant": "fractal_resnet"},
            "schedule": {"epochs": 2, "batch_size": 2, "keep_pareto_only": false},
            "augment": {"enabled": false}}"#,
    )
    .unwrap();
    let run = root.join("run");
    let out = mantis(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("pareto epoch"));
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert!(log.lines().count() >= 2, "{log}");
    assert!(run.join("pareto.json").exists() && run.join("config.json").exists());
    let mut ckpts: Vec<PathBuf> = fs::read_dir(run.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    ckpts.sort();
    assert_eq!(ckpts.len(), 2);

    let pred = root.join("pred");
    let out = mantis(&[
        "infer", "--a", s(&a), "--b", s(&b), "--checkpoint", s(&ckpts[0]), "--checkpoint", s(&ckpts[1]), "--label",
        s(&label), "--out", s(&pred), "--window", "16", "--stride", "8",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("f1"));
    for f in ["probability.png", "heatmap.png", "mask.png", "confusion.png", "probability.json"] {
        assert!(pred.join(f).exists(), "{f}");
    }
    assert_eq!(fs::metadata(pred.join("probability.f32")).unwrap().len(), 64 * 64 * 4);

    let labels = root.join("labels");
    fs::create_dir(&labels).unwrap();
    fs::copy(&label, labels.join("mask.png")).unwrap();
    let out = mantis(&["eval", "--pred", s(&pred), "--label", s(&labels)]);
    assert_eq!(code(&out), 0, "{out:?}");
    let text = stdout(&out);
    assert!(text.starts_with("name,precision,recall,f1,mcc,iou"));
    assert!(text.contains("\nmask.png,") && text.contains("\nTOTAL,"));
}

#[test]
fn landscape_writes_csv() {
    let out = mantis(&["landscape", "--depths", "0,5", "--grid", "11"]);
    assert_eq!(code(&out), 0, "{out:?}");
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1 + 2 * 11 * 11);
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("l.csv");
    assert_eq!(code(&mantis(&["landscape", "--grid", "5", "--out", s(&file)])), 0);
    assert!(fs::read_to_string(file).unwrap().lines().count() > 1);
}

#[test]
fn gradcheck_layers_pass() {
    let out = mantis(&["gradcheck", "--skip-network"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(!stdout(&out).contains("FAIL"));
}

#[test]
fn exit_codes() {
    assert_eq!(code(&mantis(&[])), 1);
    assert_eq!(code(&mantis(&["frobnicate"])), 1);
    assert_eq!(code(&mantis(&["landscape", "--l", "0.5"])), 1);
    assert_eq!(code(&mantis(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"model": {"depht": 3}}"#).unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&mantis(&["train", "--config", s(&bad), "--out", s(&run)])), 1);

    let missing = dir.path().join("nope.png");
    let out = mantis(&[
        "chip", "--a", s(&missing), "--b", s(&missing), "--label", s(&missing), "--out", s(dir.path()),
    ]);
    assert_eq!(code(&out), 2, "{out:?}");
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&mantis(&["eval", "--pred", s(&empty), "--label", s(&empty)])), 2);
}
