use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use dau_core::analysis::{
    distance_histogram, parameter_report, prune_by_relative_threshold, scatter_export, write_histogram_csv,
    write_scatter_csv, ThresholdPolicy,
};
use dau_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use dau_core::config::{apply_override, parse_properties, Properties, RunConfig};
use dau_core::data::{load_cifar10_subset, write_synthetic_cifar10, DatasetSplit};
use dau_core::network::{build_network, Layer};
use dau_core::train::{evaluate, train, write_metrics_csv, MetricsRow, OptimizerState};
use dau_core::verify::{run_gradcheck, run_oraclecheck, GradCheckConfig, OracleCheckConfig};

use crate::{Cli, Command, Common, Failure};

type Outcome = std::result::Result<(), Failure>;

pub const DEFAULT_DATA_DIR: &str = "data/cifar-10-batches-bin";
pub const RESOLVED_CONFIG: &str = "resolved.conf";
pub const RUN_RECORD: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn run(cli: &Cli) -> Outcome {
    let threads = init_threads(&cli.common)?;
    let c = &cli.common;
    match &cli.command {
        Command::Train { resume } => cmd_train(c, threads, resume.as_deref()),
        Command::Eval { checkpoint } => cmd_eval(c, threads, checkpoint),
        Command::Gradcheck {
            analytic,
            corrupt,
            instances,
        } => cmd_gradcheck(c, threads, *analytic, *corrupt, *instances),
        Command::Oraclecheck { integer_only, cases } => cmd_oraclecheck(c, threads, *integer_only, *cases),
        Command::Analyze {
            checkpoint,
            layer,
            fractions,
            bin_width,
        } => cmd_analyze(c, threads, checkpoint, *layer, fractions, *bin_width),
        Command::Prune {
            checkpoint,
            tau,
            policy,
        } => cmd_prune(c, threads, checkpoint, *tau, policy),
        Command::Synth { train_per_file, test } => cmd_synth(c, *train_per_file, *test),
    }
}

/// Thread count from the flag, else `DAU_THREADS`, else 0 (all cores).
fn init_threads(c: &Common) -> std::result::Result<usize, Failure> {
    let threads = match c.threads {
        Some(t) => t,
        None => match std::env::var("DAU_THREADS") {
            Ok(v) if !v.trim().is_empty() => v
                .trim()
                .parse()
                .map_err(|_| Failure::usage(format!("DAU_THREADS must be a non-negative integer, got {v:?}")))?,
            _ => 0,
        },
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure {
            code: 3,
            kind: "internal",
            message: format!("thread pool: {e}"),
        })?;
    Ok(rayon::current_num_threads())
}

/// File, then `--set` overrides, then `--seed`.
fn resolve_config(c: &Common, fallback: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    let path = c.config.as_deref().or(fallback.filter(|p| p.is_file()));
    let mut props = match path {
        Some(p) => {
            if !p.is_file() {
                return Err(dau_core::Error::MissingFile(p.to_path_buf()).into());
            }
            parse_properties(&fs::read_to_string(p)?).map_err(|e| Failure::from(e).prefixed(p))?
        }
        None => Properties::new(),
    };
    for o in &c.overrides {
        apply_override(&mut props, o)?;
    }
    if let Some(seed) = c.seed {
        props.insert("train.seed".into(), seed.to_string());
    }
    Ok(RunConfig::from_properties(props)?)
}

impl Failure {
    fn prefixed(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

fn out_dir(c: &Common, default: &str) -> std::result::Result<PathBuf, Failure> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| Failure::from(e).prefixed(&dir))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::from(e).prefixed(path))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure {
        code: 3,
        kind: "internal",
        message: e.to_string(),
    })?;
    text.push('\n');
    write(path, text)
}

/// Records how the run was invoked (no timestamps, so reruns match).
fn write_run_record(dir: &Path, command: &str, c: &Common, threads: usize, extra: serde_json::Value) -> Outcome {
    let record = json!({
        "command": command,
        "config": c.config,
        "data_dir": c.data_dir,
        "out": dir,
        "overrides": c.overrides,
        "seed": c.seed,
        "threads": threads,
        "args": extra,
    });
    write_json(&dir.join(RUN_RECORD), &record)
}

fn data_dir(c: &Common) -> PathBuf {
    c.data_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

fn load_data(c: &Common, cfg: &RunConfig) -> std::result::Result<(DatasetSplit, DatasetSplit), Failure> {
    Ok(load_cifar10_subset(&data_dir(c), cfg.data.train_limit, cfg.data.test_limit)?)
}

fn format_row(r: &MetricsRow) -> String {
    let acc = r.eval_acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
    format!(
        "epoch={} iter={} train_loss={:.5} eval_acc={acc} lr={}",
        r.epoch, r.iter, r.train_loss, r.lr
    )
}

fn cmd_train(c: &Common, threads: usize, resume: Option<&Path>) -> Outcome {
    let mut cfg = resolve_config(c, None)?;
    let (mut net, mut state) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.network.spec() != &cfg.net {
                cfg.net = ck.network.spec().clone();
            }
            if c.seed.is_none() && !c.overrides.iter().any(|o| o.trim_start().starts_with("train.seed")) {
                cfg.train.seed = ck.seed;
            }
            (ck.network, ck.optimizer)
        }
        None => {
            let net = build_network(&cfg.net, cfg.train.seed)?;
            let state = OptimizerState::new(&net);
            (net, state)
        }
    };
    let (data, test) = load_data(c, &cfg)?;
    let dir = out_dir(c, "runs/train")?;
    write(&dir.join(RESOLVED_CONFIG), cfg.to_text())?;
    write_run_record(&dir, "train", c, threads, json!({ "resume": resume }))?;
    write_metrics(&dir, &[])?;

    let seed = cfg.train.seed;
    let every = cfg.checkpoint_every;
    let mut rows: Vec<MetricsRow> = Vec::new();
    train(&mut net, &data, Some(&test), &cfg.train, &mut state, |net, state, row| {
        println!("{}", format_row(row));
        rows.push(row.clone());
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows)?;
        fs::write(dir.join(METRICS_FILE), buf)?;
        if every > 0 && row.epoch % every == 0 {
            let ck = Checkpoint {
                network: net.clone(),
                optimizer: state.clone(),
                seed,
            };
            save_checkpoint(&dir.join(format!("epoch_{:04}.ckpt", row.epoch)), &ck)?;
        }
        Ok(())
    })?;
    let path = dir.join(FINAL_CHECKPOINT);
    save_checkpoint(
        &path,
        &Checkpoint {
            network: net,
            optimizer: state,
            seed,
        },
    )?;
    println!("checkpoint={}", path.display());
    Ok(())
}

fn write_metrics(dir: &Path, rows: &[MetricsRow]) -> Outcome {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, rows)?;
    write(&dir.join(METRICS_FILE), buf)
}

fn cmd_eval(c: &Common, threads: usize, checkpoint: &Path) -> Outcome {
    let ck = load_checkpoint(checkpoint)?;
    // The run's own config fixes the training subset, hence the input mean.
    let beside = checkpoint.parent().map(|d| d.join(RESOLVED_CONFIG));
    let cfg = resolve_config(c, beside.as_deref())?;
    let (_, test) = load_data(c, &cfg)?;
    let acc = evaluate(&ck.network, &test)?;
    println!("accuracy={acc:.6} samples={}", test.len());
    if c.out.is_some() {
        let dir = out_dir(c, "")?;
        write(&dir.join(RESOLVED_CONFIG), cfg.to_text())?;
        write_run_record(&dir, "eval", c, threads, json!({ "checkpoint": checkpoint }))?;
        write_json(
            &dir.join("eval.json"),
            &json!({ "checkpoint": checkpoint, "accuracy": acc, "samples": test.len() }),
        )?;
    }
    Ok(())
}

fn cmd_gradcheck(c: &Common, threads: usize, analytic: bool, corrupt: bool, instances: usize) -> Outcome {
    if instances == 0 {
        return Err(Failure::usage("--instances must be >= 1"));
    }
    let cfg = GradCheckConfig {
        seed: c.seed.unwrap_or(0),
        instances,
        analytic,
        corrupt,
    };
    let report = run_gradcheck(&cfg);
    println!(
        "{:<12} {:<32} {:>9} {:>12} {:>10}  result",
        "layer", "class", "instances", "worst", "tolerance"
    );
    for e in &report.entries {
        println!(
            "{:<12} {:<32} {:>9} {:>12.3e} {:>10.1e}  {}",
            e.layer,
            e.class,
            e.instances,
            e.worst,
            e.tolerance,
            if e.passed() { "PASS" } else { "FAIL" }
        );
    }
    if c.out.is_some() {
        let dir = out_dir(c, "")?;
        write_run_record(
            &dir,
            "gradcheck",
            c,
            threads,
            json!({ "analytic": analytic, "corrupt": corrupt, "instances": instances }),
        )?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    let failures = report.failures();
    if failures.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = failures
        .iter()
        .map(|e| format!("{}/{} worst={:.3e} tol={:.1e}", e.layer, e.class, e.worst, e.tolerance))
        .collect();
    Err(Failure::check(format!(
        "gradcheck: {} classes out of tolerance: {}",
        failures.len(),
        list.join("; ")
    )))
}

fn cmd_oraclecheck(c: &Common, threads: usize, integer_only: bool, cases: usize) -> Outcome {
    if cases == 0 {
        return Err(Failure::usage("--cases must be >= 1"));
    }
    let report = run_oraclecheck(&OracleCheckConfig {
        seed: c.seed.unwrap_or(0),
        cases,
        integer_only,
    });
    let worst = report
        .cases
        .iter()
        .max_by(|a, b| a.max_diff.total_cmp(&b.max_diff))
        .expect("at least one case");
    println!(
        "cases={} max_diff_subpixel={:.3e} max_diff_integer={:.3e}",
        report.cases.len(),
        report.max_subpixel(),
        report.max_integer()
    );
    println!(
        "worst case: dims={:?} F={} K={} sigma={} integer_mu={} margin={} compared={} max_diff={:.3e}",
        worst.dims, worst.out_features, worst.units, worst.sigma, worst.integer_mu, worst.margin, worst.compared, worst.max_diff
    );
    if c.out.is_some() {
        let dir = out_dir(c, "")?;
        write_run_record(
            &dir,
            "oraclecheck",
            c,
            threads,
            json!({ "integer_only": integer_only, "cases": cases }),
        )?;
        write_json(&dir.join("oraclecheck.json"), &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::check(format!(
            "oraclecheck: max diff subpixel {:.3e} (tol 1e-5), integer {:.3e} (tol 1e-6)",
            report.max_subpixel(),
            report.max_integer()
        )))
    }
}

/// Resolves a 1-based `--layer` to a 0-based DAU layer position.
fn dau_layer_index(net: &dau_core::network::Network, layer: usize) -> std::result::Result<usize, Failure> {
    if layer == 0 {
        return Err(Failure::usage("--layer is 1-based (net.layerN)"));
    }
    net.dau(layer - 1)?;
    Ok(layer - 1)
}

fn fraction_tag(f: f64) -> String {
    format!("{f:.2}")
}

fn cmd_analyze(
    c: &Common,
    threads: usize,
    checkpoint: &Path,
    layer: Option<usize>,
    fractions: &[f64],
    bin_width: f64,
) -> Outcome {
    let ck = load_checkpoint(checkpoint)?;
    let net = &ck.network;
    let layers = match layer {
        Some(l) => vec![dau_layer_index(net, l)?],
        None => net.dau_layers(),
    };
    if layers.is_empty() {
        return Err(Failure::usage("the network has no DAU layers"));
    }
    if fractions.is_empty() {
        return Err(Failure::usage("--fractions needs at least one value"));
    }
    let dir = out_dir(c, "analysis")?;
    let mut summary = Vec::new();
    for &l in &layers {
        for &f in fractions {
            let hist = distance_histogram(net, l, f, bin_width)?;
            let scatter = scatter_export(net, l, f)?;
            let tag = format!("layer{}_f{}", l + 1, fraction_tag(f));
            let mut buf = Vec::new();
            write_histogram_csv(&mut buf, &hist)?;
            write(&dir.join(format!("hist_{tag}.csv")), buf)?;
            let mut buf = Vec::new();
            write_scatter_csv(&mut buf, &scatter)?;
            write(&dir.join(format!("scatter_{tag}.csv")), buf)?;
            println!(
                "layer={} fraction={} units={} mass={:.6}",
                l + 1,
                fraction_tag(f),
                hist.records.len(),
                hist.total_mass()
            );
            summary.push(json!({
                "layer": l + 1,
                "retained_fraction": f,
                "retained_units": hist.records.len(),
                "total_mass": hist.total_mass(),
                "bin_width": bin_width,
            }));
        }
    }
    let params = parameter_report(net);
    write(&dir.join("parameters.txt"), params.to_text())?;
    write_json(&dir.join("parameters.json"), &params)?;
    write_json(&dir.join("analyze.json"), &summary)?;
    write_run_record(
        &dir,
        "analyze",
        c,
        threads,
        json!({ "checkpoint": checkpoint, "layer": layer, "fractions": fractions, "bin_width": bin_width }),
    )
}

fn cmd_prune(c: &Common, threads: usize, checkpoint: &Path, tau: f64, policy: &str) -> Outcome {
    let policy: ThresholdPolicy = policy.parse()?;
    let ck = load_checkpoint(checkpoint)?;
    if !ck.network.layers().iter().any(|l| matches!(l, Layer::Dau { .. })) {
        return Err(Failure::usage("the network has no DAU layers"));
    }
    let (pruned, report) = prune_by_relative_threshold(&ck.network, tau, policy)?;
    let dir = out_dir(c, "pruned")?;
    print!("{}", report.to_text());
    let mut summary = json!({ "prune": report });
    if let Some(data) = &c.data_dir {
        let beside = checkpoint.parent().map(|d| d.join(RESOLVED_CONFIG));
        let cfg = resolve_config(c, beside.as_deref())?;
        let (_, test) = load_cifar10_subset(data, cfg.data.train_limit, cfg.data.test_limit)?;
        let before = evaluate(&ck.network, &test)?;
        let after = evaluate(&pruned, &test)?;
        println!("accuracy_before={before:.6} accuracy_after={after:.6} samples={}", test.len());
        summary["accuracy_before"] = json!(before);
        summary["accuracy_after"] = json!(after);
    }
    write(&dir.join("prune_report.txt"), report.to_text())?;
    write_json(&dir.join("prune_report.json"), &summary)?;
    let params = parameter_report(&pruned);
    write(&dir.join("parameters.txt"), params.to_text())?;
    write_json(&dir.join("parameters.json"), &params)?;
    save_checkpoint(
        &dir.join("pruned.ckpt"),
        &Checkpoint {
            network: pruned,
            optimizer: ck.optimizer,
            seed: ck.seed,
        },
    )?;
    write_run_record(
        &dir,
        "prune",
        c,
        threads,
        json!({ "checkpoint": checkpoint, "tau": tau, "policy": policy }),
    )
}

fn cmd_synth(c: &Common, train_per_file: usize, test: usize) -> Outcome {
    if train_per_file == 0 || test == 0 {
        return Err(Failure::usage("--train-per-file and --test must be >= 1"));
    }
    let dir = c.out.clone().or_else(|| c.data_dir.clone()).unwrap_or_else(|| PathBuf::from("data/synthetic"));
    let files = write_synthetic_cifar10(&dir, train_per_file, test, c.seed.unwrap_or(0))?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
