use std::path::Path;
use std::process::{Command, Output};

fn patchcert(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchcert"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path, ext: &str) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(ext))
        .collect();
    names.sort();
    names
}

/// Trains a small stripe model into `dir/model.svit`.
fn train(dir: &Path) {
    let out = patchcert(
        dir,
        &["train", "--epochs", "3", "--ckpt", "model.svit", "--out", "runs"],
    );
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert!(summary.is_object());
    assert!(dir.join("model.svit").exists());
    assert_eq!(files(&dir.join("runs"), ".jsonl").len(), 1);
}

#[test]
fn missing_checkpoint_exits_2_with_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = patchcert(dir.path(), &["certify", "--ckpt", "nope.svit"]);
    assert_eq!(out.status.code(), Some(2));
    let record: serde_json::Value = serde_json::from_str(stderr(&out).trim()).unwrap();
    assert_eq!(record["exit_code"], 2);
    assert!(record["message"].as_str().unwrap().contains("nope.svit"));
}

#[test]
fn invalid_parameters_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    // patch larger than the 16-pixel toy image
    let out = patchcert(dir.path(), &["delta", "--patch-sizes", "20"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let out = patchcert(dir.path(), &["delta", "--b", "0"]);
    assert_eq!(out.status.code(), Some(3));
    let out = patchcert(dir.path(), &["delta", "--workers", "0"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_config_key_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"sed": 1}"#).unwrap();
    let out = patchcert(dir.path(), &["delta", "--config", "c.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn delta_table_flags_strided_disagreement() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["delta", "--h", "224", "--w", "224", "--b", "19", "--patch-sizes", "32"];
    let out = patchcert(dir.path(), &args);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("50"), "{text}");
    assert!(!text.contains("DISAGREE"));

    let out = patchcert(dir.path(), &[&args[..], &["--stride", "5"]].concat());
    let text = stdout(&out);
    assert!(text.contains("DISAGREE"), "{text}");
}

#[test]
fn ablate_dumps_image_and_mask_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = patchcert(dir.path(), &["ablate", "--b", "4", "--stride", "4", "--out", "dump"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let dump = dir.path().join("dump");
    assert_eq!(files(&dump, ".ppm").len(), 4);
    assert_eq!(files(&dump, ".pgm").len(), 4);
    let ppm = std::fs::read(dump.join("abl_0.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
}

#[test]
fn certify_is_reproducible_and_append_only() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path());
    let certify = |workers: &str| {
        let out = patchcert(
            dir.path(),
            &[
                "certify",
                "--ckpt",
                "model.svit",
                "--out",
                "reports",
                "--workers",
                workers,
            ],
        );
        assert!(out.status.success(), "{}", stderr(&out));
        stdout(&out)
    };
    let first = certify("1");
    let second = certify("2");
    assert_eq!(first, second);
    // identical content is not duplicated
    let reports = dir.path().join("reports");
    assert_eq!(files(&reports, ".json").len(), 1);
    assert_eq!(files(&reports, ".csv").len(), 1);

    let other = patchcert(
        dir.path(),
        &["certify", "--ckpt", "model.svit", "--out", "reports", "--b", "5"],
    );
    assert!(other.status.success());
    assert_eq!(files(&reports, ".json").len(), 2);
}

#[test]
fn mismatched_checkpoint_and_data_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path());
    std::fs::write(dir.path().join("c.json"), r#"{"model": {"h": 32, "w": 32}}"#).unwrap();
    let out = patchcert(dir.path(), &["certify", "--ckpt", "model.svit", "--config", "c.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn sweep_warns_on_duplicate_grid_points() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path());
    let out = patchcert(
        dir.path(),
        &[
            "sweep",
            "--ckpt",
            "model.svit",
            "--b-values",
            "2,3,2",
            "--strides",
            "1,2",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("duplicate sweep grid point b=2"));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 2, "{text}");
}
