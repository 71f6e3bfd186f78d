use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use symbreak::harness::{
    build_model, load_checkpoint, probe_batch, resolve_output_dir, run_meanfield_sweep, run_training, verify_ntk,
    verify_sigprop, write_sweep_csv, CheckStatus, ExperimentConfig, HarnessError, MetricsLog, Result, SweepConfig,
};
use symbreak::meanfield::Quadrature;
use symbreak::metrics::correlation_report;
use symbreak::nn::{softmax_cross_entropy, Mechanisms, Mode};

#[derive(Parser)]
#[command(name = "symbreak", version, about = "Weight-symmetry breaking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory. Defaults to the config's output_dir, then $SYMBREAK_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed and log correlations to CSV.
    Train(Common),
    /// Signal-propagation checks on the freshly initialised network.
    Sigprop(Common),
    /// Tangent kernel of a zero-initialised ConstNet against its linear prediction.
    Ntk(Common),
    /// Mean-field correlation trajectories and fixed-point stability.
    Meanfield(Common),
    /// One-shot correlation report of a saved checkpoint.
    Metrics(Common),
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| HarnessError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
    let out = resolve_output_dir(c.out.as_deref(), cfg.and_then(|c| c.output_dir.as_deref()));
    fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

fn train(c: &Common) -> Result<bool> {
    let cfg = load_config(c)?;
    let out = out_dir(c, Some(&cfg))?;
    let summaries = run_training(&cfg, &out)?;
    for s in &summaries {
        println!(
            "seed {}: steps {} test_acc {} min_c_f {} {}",
            s.seed,
            s.steps,
            fmt_opt(s.test_acc),
            fmt_opt(s.min_conv_c_f.or(s.min_c_f)),
            s.aborted.as_deref().unwrap_or("")
        );
    }
    Ok(summaries.iter().all(|s| s.aborted.is_none()))
}

fn fmt_sci(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.3e}"))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

/// Probe inputs: the first examples of the dataset when there is one,
/// Gaussian noise otherwise.
fn probe_inputs(
    cfg: &ExperimentConfig,
    model: &symbreak::arch::Model,
    n: usize,
    seed: u64,
) -> Result<(symbreak::tensor::Tensor, Vec<usize>)> {
    match &cfg.dataset {
        Some(d) => {
            let data = d.load()?;
            let idx: Vec<usize> = (0..n.min(data.len())).collect();
            Ok(data.batch(&idx, model.net.precision()))
        }
        None => probe_batch(model, n, seed),
    }
}

fn sigprop(c: &Common) -> Result<bool> {
    let cfg = load_config(c)?;
    let out = out_dir(c, Some(&cfg))?;
    let mut ok = true;
    for &seed in &cfg.seeds {
        let model = build_model(&cfg, seed)?;
        let (x, labels) = probe_inputs(&cfg, &model, 8, seed)?;
        let report = verify_sigprop(&model, &x, &labels, &cfg.sigprop)?;
        for check in &report.checks {
            let status = match &check.status {
                CheckStatus::Pass => "PASS".to_string(),
                CheckStatus::Fail => "FAIL".to_string(),
                CheckStatus::Skipped(r) => format!("skipped ({r})"),
            };
            println!(
                "seed {seed} ({}) {}: {status} measured {} tol {}",
                check.id,
                check.name,
                fmt_sci(check.measured),
                fmt_sci(check.tolerance)
            );
        }
        ok &= report.all_passed();
        write_json(&out.join(format!("sigprop_seed_{seed}.json")), &report)?;
    }
    Ok(ok)
}

fn ntk(c: &Common) -> Result<bool> {
    let cfg = load_config(c)?;
    let out = out_dir(c, Some(&cfg))?;
    let mut ok = true;
    for &seed in &cfg.seeds {
        let model = build_model(&cfg, seed)?;
        let (x, _) = probe_inputs(&cfg, &model, 4, seed)?;
        let report = verify_ntk(&model, &x)?;
        let pass = report.max_relative_deviation < 1e-5;
        println!(
            "seed {seed}: max relative deviation {:.3e}, max cross-class entry {:.3e}: {}",
            report.max_relative_deviation,
            report.max_off_diagonal,
            if pass { "PASS" } else { "FAIL" }
        );
        ok &= pass;
        write_json(&out.join(format!("ntk_seed_{seed}.json")), &report)?;
    }
    Ok(ok)
}

fn meanfield(c: &Common) -> Result<bool> {
    // Accept a full experiment config with a `meanfield` section, a bare
    // sweep config, or nothing at all.
    let (mut sweep, cfg) = match &c.config {
        None => (SweepConfig::default(), None),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
            match ExperimentConfig::from_json(&text) {
                Ok(cfg) => (cfg.meanfield.clone().unwrap_or_default(), Some(cfg)),
                Err(_) => (serde_json::from_str(&text)?, None),
            }
        }
    };
    if let (Some(s), Quadrature::MonteCarlo { samples, .. }) = (c.seed, sweep.quadrature) {
        sweep.quadrature = Quadrature::MonteCarlo { samples, seed: s };
    }
    let out = out_dir(c, cfg.as_ref())?;
    let rows = run_meanfield_sweep(&sweep)?;
    let path = out.join("meanfield.csv");
    let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    write_sweep_csv(&rows, BufWriter::new(file))?;
    for r in rows.iter().filter(|r| r.t == sweep.t_max as u64) {
        println!(
            "{} c0={}: C_f after {} steps = {:.6}, lambda1 {}",
            r.activation,
            r.c0,
            r.t,
            r.c_f,
            r.lambda1.map_or("-".into(), |l| format!("{l:.6}"))
        );
    }
    println!("wrote {}", path.display());
    Ok(true)
}

fn metrics(c: &Common) -> Result<bool> {
    let cfg = load_config(c)?;
    let ckpt = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| HarnessError::Config("metrics needs `checkpoint` in the config".into()))?;
    let out = out_dir(c, Some(&cfg))?;
    let seed = cfg.seeds[0];
    let (net, manifest) = load_checkpoint(&ckpt)?;
    let model = symbreak::arch::Model {
        net,
        arch: manifest
            .architecture
            .clone()
            .unwrap_or_else(|| cfg.architecture.clone()),
        taps: Vec::new(),
    };
    let (x, labels) = probe_inputs(&cfg, &model, cfg.batch_size.min(128), seed)?;
    let mech = Mechanisms::deterministic();
    let pass = model.net.forward(&x, Mode::Eval, &mech)?;
    let (_, dl) = softmax_cross_entropy(&pass.logits, &labels)?;
    let grads = model.net.backward(&pass, &dl, &mech)?;
    let report = correlation_report(&model.net, &pass, Some(&grads));
    let path = out.join("metrics.csv");
    let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    let mut log = MetricsLog::new(BufWriter::new(file))?;
    log.report(seed, 0, &report)?;
    log.into_inner()?.flush().map_err(|e| HarnessError::io(&path, e))?;
    write_json(&out.join("metrics.json"), &report)?;
    for l in &report.layers {
        println!("{}: c_f {} c_b {}", l.layer, fmt_opt(l.c_f), fmt_opt(l.c_b));
    }
    println!("mean dissimilarity {}", fmt_opt(report.mean_dissimilarity));
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Sigprop(c) => sigprop(c),
        Command::Ntk(c) => ntk(c),
        Command::Meanfield(c) => meanfield(c),
        Command::Metrics(c) => metrics(c),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
