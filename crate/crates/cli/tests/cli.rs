mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use common::{run, run_ok, tiny_dataset, uagan_cmd, TinyData};
use uagan::metrics::MetricsReport;
use uagan::phantom::{read_slice, Dataset};
use uagan::trainer::{read_loss_log, RunManifest, LOSS_LOG, RUN_MANIFEST};

fn train_tiny(data: &TinyData, runs: &Path, variant: &str, name: &str, extra: &[&str]) {
    run_ok(
        uagan_cmd(runs)
            .args(["train", "--config"])
            .arg(&data.config)
            .args(["--variant", variant, "--out", name, "--data"])
            .arg(&data.root)
            .args(extra),
    );
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(uagan_cmd(dir.path()).arg("--help")).status.code(), Some(0));
    assert_eq!(run(uagan_cmd(dir.path()).arg("--version")).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&mut uagan_cmd(dir.path())).status.code(), Some(1));
    assert_eq!(run(uagan_cmd(dir.path()).args(["frobnicate"])).status.code(), Some(1));
    assert_eq!(run(uagan_cmd(dir.path()).args(["train", "--epochs", "many"])).status.code(), Some(1));
    let out = run(uagan_cmd(dir.path()).args(["gen-data", "--patients", "0", "--out"]).arg(dir.path().join("d")));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_variant_lists_presets() {
    let data = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let out = run(uagan_cmd(dir.path()).args(["train", "--variant", "stargan", "--data"]).arg(&data.root));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for p in ["uagan", "uagan-atten", "uagan-fuse", "uagan-trans", "joint", "individual"] {
        assert!(err.contains(p), "missing {p} in: {err}");
    }
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[trainer]\nepoch = 3\n").unwrap();
    let out =
        run(uagan_cmd(dir.path()).args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("d")));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_runtime_fault() {
    let data = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let out = run(uagan_cmd(dir.path()).args(["eval", "--run", "nowhere", "--data"]).arg(&data.root));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_lists_patients_and_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str| {
        run_ok(
            uagan_cmd(dir.path())
                .args(["gen-data", "--patients", "30", "--modalities", "3", "--seed", "1", "--slices", "2", "--out"])
                .arg(dir.path().join(name)),
        )
    };
    let summary = gen("a");
    gen("b");
    let m = Dataset::load(&dir.path().join("a/train")).unwrap().manifest;
    assert_eq!(m.patients.len(), 30);
    assert_eq!(m.patients_per_modality().iter().sum::<usize>(), 30);
    assert!(summary.contains("train: 30 patients"), "{summary}");
    assert_eq!(files(&dir.path().join("a")), files(&dir.path().join("b")));
}

#[test]
fn train_writes_layout_under_runs_dir() {
    let data = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    train_tiny(&data, &runs, "uagan", "smoke", &["--epochs", "2", "--seed", "1"]);
    let run = runs.join("smoke");
    for p in ["manifest.json", "checkpoints/final.ckpt", "logs/train.jsonl"] {
        assert!(run.join(p).is_file(), "missing {p}");
    }
    let m = RunManifest::load(&run.join(RUN_MANIFEST)).unwrap();
    assert_eq!(m.config.epochs, 2);
    assert!(m.fusion_enabled && m.attention_enabled && m.discriminator);
}

#[test]
fn fuse_manifest_records_fusion_disabled() {
    let data = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    train_tiny(&data, dir.path(), "uagan-fuse", "fuse", &["--epochs", "1"]);
    let m = RunManifest::load(&dir.path().join("fuse").join(RUN_MANIFEST)).unwrap();
    assert!(!m.fusion_enabled);
    assert!(!m.attention_enabled);
}

#[test]
fn manifest_reexecutes_the_same_run() {
    let data = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    train_tiny(&data, dir.path(), "uagan", "first", &["--epochs", "2", "--seed", "4", "--deterministic"]);
    let manifest = dir.path().join("first").join(RUN_MANIFEST);
    run_ok(
        uagan_cmd(dir.path())
            .args(["train", "--out", "again", "--config"])
            .arg(&manifest)
            .arg("--data")
            .arg(&data.root),
    );
    let a = read_loss_log(&dir.path().join("first").join(LOSS_LOG)).unwrap();
    let b = read_loss_log(&dir.path().join("again").join(LOSS_LOG)).unwrap();
    assert_eq!(a, b);
    let (ma, mb) = (
        RunManifest::load(&manifest).unwrap(),
        RunManifest::load(&dir.path().join("again").join(RUN_MANIFEST)).unwrap(),
    );
    assert_eq!(ma.config.network, mb.config.network);
    assert_eq!(ma.config.weights, mb.config.weights);
}

#[test]
fn eval_reports_and_oracle() {
    let data = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    train_tiny(&data, dir.path(), "uagan", "r", &["--epochs", "1"]);
    let first = run_ok(uagan_cmd(dir.path()).args(["eval", "--run", "r", "--data"]).arg(&data.root));
    for group in ["A\t", "B\t", "C\t", "overall\t"] {
        assert!(first.contains(group), "missing {group:?} block in {first}");
    }
    let header = first.lines().next().unwrap();
    assert_eq!(header.split('\t').count(), 7);
    for f in ["metrics.csv", "dice_per_patient.csv", "summary.txt", "summary.json"] {
        assert!(dir.path().join("r/reports").join(f).is_file(), "missing {f}");
    }
    let again = run_ok(uagan_cmd(dir.path()).args(["eval", "--run", "r", "--data"]).arg(&data.root));
    assert_eq!(first, again);

    run_ok(uagan_cmd(dir.path()).args(["eval", "--oracle", "--out", "oracle", "--data"]).arg(&data.root));
    let r = MetricsReport::read_csv(&dir.path().join("oracle/reports/metrics.csv")).unwrap();
    assert!(!r.rows.is_empty());
    assert!(r.rows.iter().all(|row| row.dice == 1.0));
}

#[test]
fn translate_writes_triplets_and_guards_segmentation_only_runs() {
    let data = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    train_tiny(&data, dir.path(), "uagan", "u", &["--epochs", "1"]);
    let out = dir.path().join("tr");
    run_ok(
        uagan_cmd(dir.path())
            .args(["translate", "--run", "u", "--target", "A", "--limit", "2", "--out"])
            .arg(&out)
            .arg("--data")
            .arg(&data.root),
    );
    let names: Vec<String> =
        fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    let cycles: Vec<&String> = names.iter().filter(|n| n.contains("-cycle") && n.ends_with(".uag")).collect();
    assert_eq!(cycles.len(), 2);
    assert_eq!(names.iter().filter(|n| n.ends_with(".pgm")).count(), 6);
    let (cycle, _) = read_slice(&out.join(cycles[0])).unwrap();
    let src_name = cycles[0].replace("-cycle", "-src");
    let (src, _) = read_slice(&out.join(src_name)).unwrap();
    assert_eq!((cycle.h, cycle.w), (src.h, src.w));

    train_tiny(&data, dir.path(), "joint", "j", &["--epochs", "1"]);
    let res = run(uagan_cmd(dir.path()).args(["translate", "--run", "j", "--target", "A", "--data"]).arg(&data.root));
    assert_ne!(res.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&res.stderr).contains("variant has no translation stream"));
}

#[test]
fn heatmap_writes_stream_images() {
    let data = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    train_tiny(&data, dir.path(), "uagan", "h", &["--epochs", "1"]);
    run_ok(uagan_cmd(dir.path()).args(["heatmap", "--run", "h", "--limit", "1", "--data"]).arg(&data.root));
    let names: Vec<String> = fs::read_dir(dir.path().join("h/reports/heatmaps"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    for kind in ["-seg.pgm", "-trans.pgm", "-fused.pgm", "-overlay.pgm"] {
        assert!(names.iter().any(|n| n.ends_with(kind)), "missing {kind} in {names:?}");
    }
    let pgm =
        fs::read(dir.path().join("h/reports/heatmaps").join(names.iter().find(|n| n.ends_with("-seg.pgm")).unwrap()))
            .unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
}

#[test]
fn ablate_skips_completed_runs() {
    let data = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let sweep = |d: &Path| {
        run_ok(
            uagan_cmd(d)
                .args([
                    "ablate",
                    "--seeds",
                    "2",
                    "--epochs",
                    "1",
                    "--variants",
                    "joint,uagan-fuse",
                    "--out",
                    "sw",
                    "--config",
                ])
                .arg(&data.config)
                .arg("--data")
                .arg(&data.root),
        )
    };
    sweep(dir.path());
    let metrics = dir.path().join("sw/joint-seed0/reports/metrics.csv");
    let stamp = fs::metadata(&metrics).unwrap().modified().unwrap();
    let table = fs::read(dir.path().join("sw/table.csv")).unwrap();
    fs::remove_dir_all(dir.path().join("sw/uagan-fuse-seed1")).unwrap();
    sweep(dir.path());
    assert_eq!(fs::metadata(&metrics).unwrap().modified().unwrap(), stamp);
    assert!(dir.path().join("sw/uagan-fuse-seed1/reports/metrics.csv").is_file());
    assert_eq!(fs::read(dir.path().join("sw/table.csv")).unwrap(), table);
}

#[test]
fn ablate_without_splits_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(uagan_cmd(dir.path()).args(["ablate", "--data"]).arg(dir.path()));
    assert_eq!(out.status.code(), Some(1));
}
