use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dau_core::checkpoint::load_checkpoint;
use dau_core::config::RunConfig;
use dau_core::data::write_synthetic_cifar10;

const SMALL_NET: &str = "\
net.layer1.features = 4
net.layer1.units = 2
net.layer5.features = 4
net.layer5.units = 2
net.layer9.features = 8
net.layer9.units = 2
train.batch_size = 50
train.epochs = 2
train.lr_steps = 1:0.001
train.checkpoint_every = 1
data.train_limit = 500
data.test_limit = 100
";

fn dau(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dau"))
        .args(args)
        .env_remove("DAU_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Synthetic dataset (500 train, 100 test) plus the small-net config.
fn fixture() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synthetic_cifar10(&data, 100, 100, 1).unwrap();
    let config = tmp.path().join("small.conf");
    fs::write(&config, SMALL_NET).unwrap();
    (tmp, data, config)
}

fn train(data: &Path, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data-dir",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    dau(&args)
}

fn assert_single_line_error(o: &Output, code: i32, kind: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error kind={kind} exit={code}: ")), "{err}");
}

#[test]
fn smoke_run_writes_all_artifacts() {
    let (tmp, data, config) = fixture();
    let out = tmp.path().join("run");
    let o = train(&data, &config, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,iter,train_loss,eval_acc,lr");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,10,"));
    assert!(lines[2].starts_with("2,20,") && lines[2].ends_with(",0.001"));
    let resolved = RunConfig::from_text(&fs::read_to_string(out.join("resolved.conf")).unwrap()).unwrap();
    assert_eq!(resolved.train.epochs, 2);
    assert_eq!(resolved.data.train_limit, Some(500));
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "train");
    for name in ["epoch_0001.ckpt", "epoch_0002.ckpt", "final.ckpt"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    assert_eq!(load_checkpoint(&out.join("final.ckpt")).unwrap().optimizer.epoch, 2);
    assert_eq!(fs::read(out.join("epoch_0002.ckpt")).unwrap(), fs::read(out.join("final.ckpt")).unwrap());

    let e = dau(&["eval", "--checkpoint", out.join("final.ckpt").to_str().unwrap(), "--data-dir", data.to_str().unwrap()]);
    assert!(e.status.success(), "{}", stderr(&e));
    assert!(stdout(&e).starts_with("accuracy="));
}

#[test]
fn identical_invocations_give_identical_files() {
    let (tmp, data, config) = fixture();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let quick = ["--set", "train.epochs=1", "--seed", "4", "--threads", "1"];
    assert!(train(&data, &config, &a, &quick).status.success());
    assert!(train(&data, &config, &b, &quick).status.success());
    for name in ["metrics.csv", "final.ckpt", "resolved.conf"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn resume_reaches_the_same_checkpoint() {
    let (tmp, data, config) = fixture();
    let (full, part, rest) = (tmp.path().join("full"), tmp.path().join("part"), tmp.path().join("rest"));
    assert!(train(&data, &config, &full, &[]).status.success());
    assert!(train(&data, &config, &part, &["--set", "train.epochs=1"]).status.success());
    let ck = part.join("final.ckpt");
    let o = train(&data, &config, &rest, &["--resume", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(full.join("final.ckpt")).unwrap(), fs::read(rest.join("final.ckpt")).unwrap());
    let tail = fs::read_to_string(rest.join("metrics.csv")).unwrap();
    let full_metrics = fs::read_to_string(full.join("metrics.csv")).unwrap();
    assert_eq!(tail.lines().nth(1), full_metrics.lines().nth(2));
}

#[test]
fn zero_epochs_write_initial_checkpoint_and_empty_metrics() {
    let (tmp, data, config) = fixture();
    let out = tmp.path().join("zero");
    let o = train(&data, &config, &out, &["--set", "train.epochs=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap(), "epoch,iter,train_loss,eval_acc,lr\n");
    let ck = load_checkpoint(&out.join("final.ckpt")).unwrap();
    assert_eq!((ck.optimizer.epoch, ck.optimizer.iteration), (0, 0));
}

#[test]
fn missing_data_dir_names_the_path() {
    let (tmp, _, config) = fixture();
    let missing = tmp.path().join("no-such-dir");
    let o = train(&missing, &config, &tmp.path().join("out"), &[]);
    assert_single_line_error(&o, 2, "missing_file");
    assert!(stderr(&o).contains(missing.to_str().unwrap()));
}

#[test]
fn usage_and_config_errors_exit_two() {
    assert_single_line_error(&dau(&["frobnicate"]), 2, "usage");
    assert_single_line_error(&dau(&["prune", "--checkpoint", "x.ckpt"]), 2, "usage");
    let (tmp, data, config) = fixture();
    let out = tmp.path().join("o");
    assert_single_line_error(&train(&data, &config, &out, &["--set", "train.bogus=1"]), 2, "config");
    assert_single_line_error(&train(&data, &config, &out, &["--set", "train.momentum=2"]), 2, "config");
    let o = Command::new(env!("CARGO_BIN_EXE_dau"))
        .args(["oraclecheck", "--cases", "1"])
        .env("DAU_THREADS", "many")
        .output()
        .unwrap();
    assert_single_line_error(&o, 2, "usage");
}

#[test]
fn threads_fall_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_dau"))
        .args(["oraclecheck", "--cases", "4", "--out", out.to_str().unwrap()])
        .env("DAU_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["threads"], 1);
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let o = dau(&["gradcheck", "--analytic", "--instances", "4"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("dmu (analytic, smooth input)"));
    assert!(!stdout(&o).contains("FAIL"));
    let bad = dau(&["gradcheck", "--corrupt", "--instances", "2"]);
    assert_single_line_error(&bad, 1, "check_failed");
    assert!(stderr(&bad).contains("dau/dw"));
}

#[test]
fn oraclecheck_reports_the_worst_case() {
    let o = dau(&["oraclecheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("cases=200"));
    assert!(stdout(&o).contains("worst case: dims="));
    let i = dau(&["oraclecheck", "--integer-only", "--cases", "50"]);
    assert!(i.status.success());
    assert!(stdout(&i).contains("max_diff_subpixel=0.000e0"));
}

#[test]
fn analyze_and_prune() {
    let (tmp, data, config) = fixture();
    let run = tmp.path().join("run");
    assert!(train(&data, &config, &run, &["--set", "train.epochs=1"]).status.success());
    let ck = run.join("final.ckpt");
    let ck = ck.to_str().unwrap();

    let an = tmp.path().join("an");
    let o = dau(&["analyze", "--checkpoint", ck, "--out", an.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for layer in [1, 5, 9] {
        for f in ["1.00", "0.90", "0.75"] {
            let hist = fs::read_to_string(an.join(format!("hist_layer{layer}_f{f}.csv"))).unwrap();
            assert!(hist.starts_with("bin_lo,bin_hi,mass\n"));
            assert!(an.join(format!("scatter_layer{layer}_f{f}.csv")).is_file());
        }
    }
    assert!(an.join("parameters.txt").is_file());
    let bad = dau(&["analyze", "--checkpoint", ck, "--layer", "2", "--out", an.to_str().unwrap()]);
    assert_single_line_error(&bad, 2, "not_dau_layer");
    let bad = dau(&["analyze", "--checkpoint", ck, "--layer", "40", "--out", an.to_str().unwrap()]);
    assert_single_line_error(&bad, 2, "layer_index");

    let p0 = tmp.path().join("p0");
    let o = dau(&["prune", "--checkpoint", ck, "--tau", "0", "--out", p0.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(load_checkpoint(&p0.join("pruned.ckpt")).unwrap(), load_checkpoint(Path::new(ck)).unwrap());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p0.join("prune_report.json")).unwrap()).unwrap();
    assert_eq!(report["prune"]["removed"], 0);
    assert_eq!(report["prune"]["removed_pct"], 0.0);

    let p = tmp.path().join("p");
    let o = dau(&["prune", "--checkpoint", ck, "--tau", "0.5", "--policy", "filter-max", "--out", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pruned = load_checkpoint(&p.join("pruned.ckpt")).unwrap();
    assert!(pruned.network.dau(0).unwrap().active_units() < 4 * 3 * 2);
    let bad = dau(&["prune", "--checkpoint", ck, "--tau", "0.1", "--policy", "median", "--out", p.to_str().unwrap()]);
    assert_single_line_error(&bad, 2, "config");
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let (tmp, data, config) = fixture();
    let run = tmp.path().join("run");
    assert!(train(&data, &config, &run, &["--set", "train.epochs=0"]).status.success());
    let ck = run.join("final.ckpt");
    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&ck, bytes).unwrap();
    let o = dau(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data-dir", data.to_str().unwrap()]);
    assert_single_line_error(&o, 2, "corrupt_checkpoint");
}
