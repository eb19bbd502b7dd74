use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mgreid::config::Config;

fn mgreid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgreid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic dataset plus a short schedule that still exercises every stage.
fn prepare(dir: &Path) -> PathBuf {
    ok(&mgreid(&["synth", "--ids", "6", "--cams", "2", "--per", "4", "--seed", "5", "--out", p(dir)]));
    let config_path = dir.join("config.toml");
    let mut config = Config::load(&config_path).unwrap();
    config.train.epochs = 2;
    config.train.warmup_epochs = 1;
    config.train.step_epochs = vec![];
    config.train.batch_size = 8;
    config.association.dbscan_min_samples = 2;
    config.save(&config_path).unwrap();
    config_path
}

#[test]
fn synth_train_eval_extract_rollout() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = prepare(dir);
    assert!(dir.join("manifest.csv").exists());

    let run = dir.join("run");
    let stdout = ok(&mgreid(&["train", "--config", p(&config), "--fusion", "b1", "--k2", "2"]));
    assert!(stdout.contains("mAP"), "{stdout}");
    let ckpt = run.join("checkpoint.bin");
    for f in ["checkpoint.bin", "loss.csv", "eval.txt", "labels_epoch000.csv", "labels_epoch001.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let per_query = dir.join("per_query.csv");
    let table = ok(&mgreid(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&dir.join("manifest.csv")),
        "--per-query",
        p(&per_query),
    ]));
    assert_eq!(table, std::fs::read_to_string(run.join("eval.txt")).unwrap());
    let rows = std::fs::read_to_string(&per_query).unwrap();
    assert_eq!(rows.lines().next(), Some("query,ap,first_hit"));
    // 3 test identities x 2 cameras, one query each
    assert_eq!(rows.lines().count(), 1 + 6);

    let feats = dir.join("gallery.bin");
    let out = ok(&mgreid(&[
        "extract",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&dir.join("manifest.csv")),
        "--out",
        p(&feats),
    ]));
    let f = mgreid::checkpoint::read_features(&feats).unwrap();
    assert_eq!(f.rows(), 3 * 2 * 3);
    assert_eq!(f.cols(), 64);
    assert!(out.contains("18x64"), "{out}");

    let manifest = mgreid::data::DatasetManifest::load(&dir.join("manifest.csv"), 2).unwrap();
    let image = manifest.root().join(manifest.path(0));
    let prefix = dir.join("rollout");
    ok(&mgreid(&[
        "rollout",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&image),
        "--camera",
        "1",
        "--out",
        p(&prefix),
    ]));
    let text = std::fs::read_to_string(dir.join("rollout.txt")).unwrap();
    assert_eq!(text.lines().count(), 4);
    let png = mgreid::image::Image::load(&dir.join("rollout.png")).unwrap();
    assert_eq!((png.height, png.width), (4 * 16, 2 * 16));
}

#[test]
fn identical_runs_write_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = prepare(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&mgreid(&["train", "--config", p(&config), "--out", p(&a)]));
    ok(&mgreid(&["train", "--config", p(&config), "--out", p(&b)]));
    for f in ["loss.csv", "eval.txt", "labels_epoch001.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    assert_eq!(
        std::fs::read(a.join("checkpoint.bin")).unwrap(),
        std::fs::read(b.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    let out = mgreid(&["train", "--config", p(&missing)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));

    let config = prepare(tmp.path());
    let out = mgreid(&["train", "--config", p(&config), "--fusion", "max"]);
    assert!(!out.status.success());

    let out = mgreid(&["train", "--config", p(&config), "--k1", "9"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("K1"));
}
