mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{scene_config, write_scene};

const SMALL_MLP: &str = "mlp_width = 16\nepochs = 3\nbatch_size = 32\nseed = 4";

fn exitgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exitgate"))
        .args(args)
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn train(cfg: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    exitgate(&args)
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = write_scene(dir.path(), 20, 50.0, 1);
    let a = dir.path().join("a");
    let cfg = scene_config(dir.path(), &cube, &labels, &a, SMALL_MLP);
    let out = train(&cfg, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    for f in ["model.mexn", "loss_curves.csv", "manifest.txt"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    let csv = fs::read_to_string(a.join("loss_curves.csv")).unwrap();
    assert!(csv.starts_with("epoch,exit,raw_loss,mean_gate\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 3);

    let b = dir.path().join("b");
    let out = train(&cfg, &["--set", &format!("output_dir={}", b.display())]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        fs::read(a.join("loss_curves.csv")).unwrap(),
        fs::read(b.join("loss_curves.csv")).unwrap()
    );

    // The manifest is itself a config that reproduces the run.
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 4") && manifest.contains("wall_time_seconds"));
    let c = dir.path().join("c");
    let out = train(&a.join("manifest.txt"), &["--set", &format!("output_dir={}", c.display())]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert_eq!(
        fs::read(a.join("loss_curves.csv")).unwrap(),
        fs::read(c.join("loss_curves.csv")).unwrap()
    );
}

#[test]
fn missing_dataset_is_status_two_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = scene_config(
        dir.path(),
        &dir.path().join("absent.ipcube"),
        &dir.path().join("absent.txt"),
        &out_dir,
        SMALL_MLP,
    );
    let out = train(&cfg, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("absent.ipcube"));
    assert!(!out_dir.exists());
}

#[test]
fn invalid_config_is_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = write_scene(dir.path(), 4, 50.0, 2);
    let out_dir = dir.path().join("out");
    let cfg = scene_config(dir.path(), &cube, &labels, &out_dir, SMALL_MLP);
    for bad in ["tau=1.5", "regime=fixed", "colour=red", "epochs=zero"] {
        let out = train(&cfg, &["--set", bad]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
        assert!(text(&out.stderr).contains("config"), "{bad}: {}", text(&out.stderr));
    }
    assert_eq!(exitgate(&["train"]).status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn divergence_is_status_three() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = write_scene(dir.path(), 20, 50.0, 3);
    let out_dir = dir.path().join("out");
    let cfg = scene_config(dir.path(), &cube, &labels, &out_dir, SMALL_MLP);
    let out = train(&cfg, &["--set", "learning_rate=1e200", "--set", "dropout=0"]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("diverged"));
    assert!(!out_dir.exists());
}

#[test]
fn eval_and_route_stats() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = write_scene(dir.path(), 20, 50.0, 5);
    let run = dir.path().join("run");
    let cfg = scene_config(dir.path(), &cube, &labels, &run, SMALL_MLP);
    assert_eq!(train(&cfg, &[]).status.code(), Some(0));
    let ckpt = run.join("model.mexn");
    let (c, k) = (cfg.to_str().unwrap(), ckpt.to_str().unwrap());

    let out = exitgate(&["eval", "--checkpoint", k, "--config", c]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let mut lines = stdout.lines();
    assert_eq!(
        lines.next().unwrap(),
        "dataset,task,backbone,model,f1,precision,recall,exit_1,exit_2,exit_3,accuracy,expected_cost,normalized_cost"
    );
    assert!(lines.next().unwrap().starts_with("indian_pines,hyperspectral,mlp,softcgt,"));
    assert_eq!(fs::read_to_string(run.join("eval_report.csv")).unwrap(), stdout);

    // Threshold zero: everything leaves at exit 1.
    let other = dir.path().join("tau0");
    let out = exitgate(&[
        "eval", "--checkpoint", k, "--config", c, "--tau", "0", "--out",
        other.to_str().unwrap(), "--model", "probe",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let row = text(&out.stdout).lines().nth(1).unwrap().to_string();
    let cols: Vec<&str> = row.split(',').collect();
    assert_eq!(cols[3], "probe");
    assert_eq!(&cols[7..10], &["100.00", "0.00", "0.00"]);
    assert!(other.join("eval_report.csv").is_file());

    let out = exitgate(&["route-stats", "--checkpoint", k, "--config", c]);
    assert_eq!(out.status.code(), Some(0));
    let routing = fs::read_to_string(run.join("routing.csv")).unwrap();
    assert!(routing.starts_with("exit,fraction,accuracy_at_exit,cumulative_cost_units\n"));
    assert_eq!(routing.lines().count(), 4);

    assert_eq!(
        exitgate(&["eval", "--checkpoint", k, "--config", c, "--tau", "1.5"]).status.code(),
        Some(2)
    );
}

#[test]
fn bad_checkpoint_is_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = write_scene(dir.path(), 4, 50.0, 6);
    let cfg = scene_config(dir.path(), &cube, &labels, &dir.path().join("o"), SMALL_MLP);
    let bogus = dir.path().join("bogus.mexn");
    fs::write(&bogus, b"NOPE\x01\x00\x00\x00garbage").unwrap();
    let c = cfg.to_str().unwrap();
    let out = exitgate(&["eval", "--checkpoint", bogus.to_str().unwrap(), "--config", c]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("magic"), "{}", text(&out.stderr));
    let missing = dir.path().join("missing.mexn");
    let out = exitgate(&["eval", "--checkpoint", missing.to_str().unwrap(), "--config", c]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_command() {
    let a = exitgate(&["gradcheck", "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0), "{}", text(&a.stdout));
    let report = text(&a.stdout);
    for case in ["dense", "conv3x3", "batchnorm_train_4d", "mlp_soft_cgt", "cnn_hard_cgt"] {
        assert!(report.contains(case), "{case} not listed");
    }
    assert!(!report.contains("FAIL"));
    let b = exitgate(&["gradcheck", "--seed", "3"]);
    assert_eq!(a.stdout, b.stdout);

    let bad = exitgate(&["gradcheck", "--seed", "3", "--inject-fault"]);
    assert_ne!(bad.status.code(), Some(0));
    assert!(text(&bad.stdout).contains("FAIL"));
}
