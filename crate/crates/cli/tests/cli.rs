use std::path::Path;
use std::process::{Command, Output};

fn flowedit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowedit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&flowedit(&["frobnicate"], dir.path())), 2);
    assert_eq!(code(&flowedit(&["edit"], dir.path())), 2);
    let help = flowedit(&["--help"], dir.path());
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("edit"));
}

#[test]
fn missing_or_corrupt_checkpoint_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = flowedit(&["edit", "--target-prompt", "a blue circle on the left", "--out", "run"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("checkpoint"));

    std::fs::write(dir.path().join("bad.safetensors"), b"not a checkpoint").unwrap();
    let o = flowedit(
        &["reconstruct", "--checkpoint", "bad.safetensors", "--out", "run"],
        dir.path(),
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn malformed_config_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"edit": {"delta": 0.5, "typo_key": 1}}"#).unwrap();
    let o = flowedit(&["edit", "--config", "c.json", "--out", "run"], dir.path());
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    std::fs::write(dir.path().join("d.json"), "{ not json").unwrap();
    let o = flowedit(&["ablate", "--config", "d.json", "--out", "run"], dir.path());
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    // out-of-range values are config errors too
    let o = flowedit(&["edit", "--delta", "1.5", "--target-prompt", "x", "--out", "run"], dir.path());
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn gen_data_writes_images_masks_and_captions() {
    let dir = tempfile::tempdir().unwrap();
    let o = flowedit(&["gen-data", "--n", "3", "--seed", "9", "--out", "data"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = dir.path().join("data");
    for i in 0..3 {
        assert!(data.join(format!("images/{i:05}.png")).is_file());
        assert!(data.join(format!("masks/{i:05}.png")).is_file());
    }
    let captions = std::fs::read_to_string(data.join("captions.jsonl")).unwrap();
    assert_eq!(captions.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(captions.lines().next().unwrap()).unwrap();
    assert!(first["caption"].as_str().unwrap().starts_with("a "));
    assert!(data.join("manifest.json").is_file());
}

#[test]
fn train_edit_report_and_rerun_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let o = flowedit(
        &[
            "train", "--steps", "2", "--batch-size", "2", "--dataset-size", "4", "--out", "ckpt/m.safetensors",
        ],
        cwd,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["m.safetensors", "m.loss.csv", "m.summary.json"] {
        assert!(cwd.join("ckpt").join(f).is_file(), "{f} missing");
    }

    // an untrained model gives no usable mask, so run the mask-free variant
    let o = flowedit(
        &[
            "edit",
            "--checkpoint",
            "ckpt/m.safetensors",
            "--index",
            "2",
            "--target-prompt",
            "a cyan circle on the left",
            "--steps",
            "3",
            "--no-kvmix",
            "--no-latents-shift",
            "--out",
            "runs/edit",
        ],
        cwd,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = cwd.join("runs/edit");
    for f in ["config.json", "metrics.json", "manifest.json", "edited.png", "source.png", "diagnostics.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }

    let o = flowedit(
        &["reconstruct", "--checkpoint", "ckpt/m.safetensors", "--steps", "3", "--out", "runs/rec"],
        cwd,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = flowedit(&["report", "runs/edit", "runs/rec", "--out", "table.md"], cwd);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(cwd.join("table.md")).unwrap();
    assert!(table.contains("| edit |") && table.contains("| reconstruct |"), "{table}");

    let o = flowedit(&["rerun", "runs/edit", "--out", "runs/edit2"], cwd);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read(run.join("metrics.json")).unwrap(),
        std::fs::read(cwd.join("runs/edit2/metrics.json")).unwrap()
    );

    // an incomplete run is refused
    std::fs::remove_file(run.join("manifest.json")).unwrap();
    let o = flowedit(&["report", "runs/edit"], cwd);
    assert_ne!(code(&o), 0);
}
