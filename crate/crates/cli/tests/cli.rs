use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dcdc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcdc"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dcdc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) {
    let mut args = vec!["gen-data", "--out", name];
    args.extend_from_slice(extra);
    let o = dcdc(&args, dir);
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn gen_data_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "a.csv", &["--k", "4", "--n-per-cluster", "50", "--seed", "3"]);
    gen(dir.path(), "b.csv", &["--k", "4", "--n-per-cluster", "50", "--seed", "3"]);
    let a = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b.csv")).unwrap());
    assert_eq!(a.lines().count(), 200);
    assert!(a.lines().all(|l| l.split(',').count() == 17));
    let meta = fs::read_to_string(dir.path().join("a.csv.meta")).unwrap();
    assert!(meta.contains("seed = 3") && meta.contains("rows = 200"));

    gen(dir.path(), "c.csv", &["--seed", "4"]);
    assert_ne!(a, fs::read_to_string(dir.path().join("c.csv")).unwrap());
}

#[test]
fn gen_data_rejects_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dcdc(&["gen-data", "--out", "x.csv", "--k", "1"], dir.path()).status.code(), Some(1));
    assert_eq!(dcdc(&["gen-data", "--k", "3"], dir.path()).status.code(), Some(1));
    let o = dcdc(&["gen-data", "--out", "missing/dir/x.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_eval_matches_final_row() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "blobs.csv", &["--k", "3", "--n-per-cluster", "20", "--dim", "5"]);
    let o = dcdc(
        &["train", "--data", "blobs.csv", "--out", "run", "--epochs", "15", "--hidden", "16"],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    let run = dir.path().join("run");
    for f in ["config.snapshot", "metrics.csv", "affinity_M.csv", "affinity_N.csv", "model.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 16);
    let last = metrics.lines().last().unwrap();
    let tail: Vec<&str> = last.split(',').skip(4).collect();

    let o = dcdc(&["eval", "--checkpoint", "run/model.ckpt", "--data", "blobs.csv"], dir.path());
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("acc_dominating,acc_optimal,nmi,ari"));
    assert_eq!(lines.next().unwrap(), tail.join(","));

    let m = fs::read_to_string(run.join("affinity_M.csv")).unwrap();
    assert_eq!(m.lines().count(), 38);
    let n = fs::read_to_string(run.join("affinity_N.csv")).unwrap();
    assert_eq!(n.lines().count(), 3);
}

#[test]
fn snapshot_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcdc(
        &["train", "--blobs", "--out", "a", "--epochs", "3", "--hidden", "8", "--seed", "2"],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    let o = dcdc(&["train", "--config", "a/config.snapshot", "--out", "b"], dir.path());
    assert!(o.status.success(), "{o:?}");
    for f in ["metrics.csv", "model.ckpt", "config.snapshot"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn sample_only_records_zero_class_loss() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcdc(
        &["train", "--blobs", "--out", "run", "--epochs", "3", "--hidden", "8", "--sample-only"],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    for line in metrics.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2], "0");
        assert_ne!(cols[1], "0");
    }
    let snapshot = fs::read_to_string(dir.path().join("run/config.snapshot")).unwrap();
    assert!(snapshot.contains("class_weight = 0"));
}

#[test]
fn missing_dataset_fails_without_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcdc(&["train", "--data", "absent.csv", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.conf"), "blobs = true\nlearning_rate = 1\n").unwrap();
    let o = dcdc(&["train", "--config", "bad.conf", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    assert!(!dir.path().join("run").exists());

    let o = dcdc(&["train", "--blobs", "--tau", "0", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = dcdc(&["train", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = dcdc(&["train", "--blobs", "--sample-only", "--class-only"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(dcdc(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(dcdc(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn eval_rejects_corrupt_checkpoint_and_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d5.csv", &["--dim", "5", "--k", "2", "--n-per-cluster", "10"]);
    gen(dir.path(), "d6.csv", &["--dim", "6", "--k", "2", "--n-per-cluster", "10"]);
    let o = dcdc(
        &["train", "--data", "d5.csv", "--out", "run", "--epochs", "2", "--batch-size", "10"],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");

    let o = dcdc(&["eval", "--checkpoint", "run/model.ckpt", "--data", "d6.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let ckpt = dir.path().join("run/model.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&ckpt, bytes).unwrap();
    let o = dcdc(&["eval", "--checkpoint", "run/model.ckpt", "--data", "d5.csv"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}

#[test]
fn fresh_checkpoint_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "blobs.csv", &["--k", "4", "--n-per-cluster", "50"]);
    let o = dcdc(
        &["train", "--data", "blobs.csv", "--out", "run", "--epochs", "1", "--lr", "1e-12"],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    let o = dcdc(&["eval", "--checkpoint", "run/model.ckpt", "--data", "blobs.csv"], dir.path());
    let out = stdout(&o);
    let acc: f64 = out.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(acc < 0.8, "{acc}");
}

#[test]
fn gradcheck_passes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dcdc(&["gradcheck", "--seed", "4"], dir.path());
    assert!(a.status.success(), "{a:?}");
    assert!(stdout(&a).contains("result = pass"));
    let b = dcdc(&["gradcheck", "--seed", "4"], dir.path());
    assert_eq!(stdout(&a), stdout(&b));

    let t = dcdc(&["gradcheck", "--batch", "1", "--clusters", "1"], dir.path());
    assert!(t.status.success());
    assert!(stdout(&t).contains("max_rel_error = 0e0"));

    let big = dcdc(&["gradcheck", "--batch", "2000", "--clusters", "5"], dir.path());
    assert_eq!(big.status.code(), Some(1));
}
