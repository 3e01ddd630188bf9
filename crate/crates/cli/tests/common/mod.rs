#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

/// Small 32×32 setup that trains in seconds.
pub const TINY_CONFIG: &str = r#"
[data]
train_patients = 6
test_patients = 6
modalities = 3

[phantom]
image_size = 32
brain_radius_range = [10.0, 13.0]
tumor_radius_range = [2.5, 4.0]
slices_per_patient = 2

[network]
base_channels = 4
disc_base_channels = 4

[trainer]
batch_size = 4
checkpoint_every = 0
"#;

pub fn uagan_cmd(runs_dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_uagan"));
    cmd.env("UAGAN_RUNS_DIR", runs_dir).env("RUST_LOG", "warn");
    cmd
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("failed to launch uagan")
}

/// Runs to completion and returns stdout; panics with stderr on a non-zero exit.
pub fn run_ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "{:?} exited with {:?}\nstderr:\n{}",
        cmd,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub struct TinyData {
    _dir: TempDir,
    pub root: PathBuf,
    pub config: PathBuf,
}

/// Writes the tiny config and generates its dataset (`train/`, `test/`).
pub fn tiny_dataset() -> TinyData {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY_CONFIG).unwrap();
    let root = dir.path().join("data");
    run_ok(uagan_cmd(dir.path()).args(["gen-data", "--config"]).arg(&config).arg("--out").arg(&root));
    for split in ["train", "test"] {
        let m = uagan::phantom::Dataset::load(&root.join(split)).unwrap().manifest;
        assert!(
            m.patients_per_modality().iter().all(|&n| n > 0),
            "{split} split does not cover every modality: {:?}",
            m.patients_per_modality()
        );
    }
    TinyData { _dir: dir, root, config }
}
