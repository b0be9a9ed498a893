use std::path::Path;
use std::process::{Command, Output};

fn nfbeam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nfbeam"))
        .args(args)
        .current_dir(cwd)
        .env_remove("NFBEAM_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn nfbeam")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = nfbeam(&["selfcheck"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().count() >= 8);
    assert!(!text.contains("FAIL"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nfbeam(&["gen-dataset"], dir.path()).status.code(), Some(1));
    assert_eq!(
        nfbeam(&["--preset", "huge", "selfcheck"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(nfbeam(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(nfbeam(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = nfbeam(
        &[
            "evaluate",
            "--ckpt",
            "missing.ckpt",
            "--data",
            "missing.nfb",
            "--out",
            "m.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_and_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = nfbeam(&["show-config"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o).replace("context_frames = 5", "context_frames = 4");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, &text).unwrap();
    let o = nfbeam(&["--config", cfg.to_str().unwrap(), "show-config"], dir.path());
    assert!(stdout(&o).contains("context_frames = 4"));
    let o = Command::new(env!("CARGO_BIN_EXE_nfbeam"))
        .arg("show-config")
        .env("NFBEAM_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(stdout(&o).contains("context_frames = 4"));
    std::fs::write(&cfg, "[system]\nbogus = 1\n").unwrap();
    let o = nfbeam(&["--config", cfg.to_str().unwrap(), "show-config"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn end_to_end_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let steps: &[&[&str]] = &[
        &["gen-dataset", "--count", "200", "--out", "data.nfb", "--seed", "3"],
        &["pretrain", "--data", "data.nfb", "--out", "pre.ckpt", "--epochs", "1"],
        &[
            "finetune", "--data", "data.nfb", "--ckpt", "pre.ckpt", "--out", "ft.ckpt", "--epochs", "1",
        ],
        &[
            "finetune",
            "--data",
            "data.nfb",
            "--direct",
            "--out",
            "direct.ckpt",
            "--epochs",
            "1",
        ],
        &[
            "evaluate",
            "--ckpt",
            "ft.ckpt",
            "--data",
            "data.nfb",
            "--out",
            "metrics.csv",
        ],
        &[
            "sweep",
            "--axis",
            "noise_dbm",
            "--values",
            "-110,-100",
            "--ckpt",
            "ft.ckpt",
            "--count",
            "20",
            "--out",
            "sweep",
        ],
    ];
    let artifacts = [
        "data.nfb",
        "pre.ckpt",
        "pre.ckpt.log.csv",
        "ft.ckpt",
        "direct.ckpt",
        "metrics.csv",
        "sweep/sweep.csv",
        "sweep/sweep_noise_dbm.svg",
    ];
    let mut first = Vec::new();
    for round in 0..2 {
        for args in steps {
            let o = nfbeam(args, p);
            assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        }
        let bytes: Vec<Vec<u8>> = artifacts.iter().map(|a| std::fs::read(p.join(a)).unwrap()).collect();
        if round == 0 {
            first = bytes;
        } else {
            for (name, (a, b)) in artifacts.iter().zip(first.iter().zip(&bytes)) {
                assert_eq!(a, b, "{name} differs between runs");
            }
        }
    }
    let manifest = std::fs::read_to_string(p.join("ft.ckpt.manifest.toml")).unwrap();
    assert!(manifest.contains("command = \"finetune\""));
    assert!(manifest.contains("config_hash"));
}
