use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::ExperimentConfig;
use super::data::Dataset;
use super::{HarnessError, Result};
use crate::arch::{build, init_tensor, Model};
use crate::metrics::{correlation_report, CorrelationReport};
use crate::nn::{accuracy, lr_schedule, sgd_momentum_step, softmax_cross_entropy, Mechanisms, Mode, Network, NnError};
use crate::tensor::hash2;

/// Stream for the data-order generator, kept apart from weight seeds.
const DATA_ORDER_STREAM: u64 = 0xda7a;

pub const CSV_HEADER: [&str; 14] = [
    "seed",
    "step",
    "epoch",
    "layer",
    "c_f",
    "c_b",
    "c_h",
    "c_g",
    "eff_width",
    "fwd_pert",
    "grad_pert",
    "loss",
    "train_acc",
    "test_acc",
];

/// Layer name of network-level rows.
pub const NETWORK_ROW: &str = "-";
/// Layer name of the row written when a run stops on a non-finite value.
pub const ABORT_ROW: &str = "ABORT";

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Rows in the fixed CSV schema, written in order.
pub struct MetricsLog<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(inner: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(inner);
        out.write_record(CSV_HEADER)?;
        Ok(Self { out })
    }

    pub fn report(&mut self, seed: u64, epoch: usize, report: &CorrelationReport) -> Result<()> {
        for l in &report.layers {
            self.out.write_record([
                seed.to_string(),
                report.step.to_string(),
                epoch.to_string(),
                l.layer.clone(),
                num(l.c_f),
                num(l.c_b),
                num(l.c_h),
                num(l.c_g),
                num(l.effective_width),
                num(l.fwd_perturbation_ratio),
                num(l.grad_perturbation_ratio),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn network(
        &mut self,
        seed: u64,
        step: u64,
        epoch: usize,
        layer: &str,
        loss: Option<f64>,
        train_acc: Option<f64>,
        test_acc: Option<f64>,
    ) -> Result<()> {
        let mut row = vec![seed.to_string(), step.to_string(), epoch.to_string(), layer.to_string()];
        row.extend(std::iter::repeat_n(String::new(), 7));
        row.extend([num(loss), num(train_acc), num(test_acc)]);
        self.out.write_record(row)?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.out
            .into_inner()
            .map_err(|e| HarnessError::Io(format!("flushing metrics: {}", e.error())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: u64,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    /// Smallest forward correlation over convolution layers at the end.
    pub min_conv_c_f: Option<f64>,
    /// Smallest forward correlation over all weight layers at the end.
    pub min_c_f: Option<f64>,
    pub aborted: Option<String>,
}

/// Build the model for one seed and apply any initialisation overrides.
pub fn build_model(cfg: &ExperimentConfig, seed: u64) -> Result<Model> {
    let mut model = build(&cfg.architecture_for(seed), cfg.precision)?;
    for (i, o) in cfg.init_overrides.iter().enumerate() {
        let shape = model.net.param(&o.param)?.shape().to_vec();
        let t = init_tensor(&shape, &o.scheme, hash2(seed, 0x0e11 + i as u64), cfg.precision)?;
        model.net.set_param(&o.param, t)?;
    }
    Ok(model)
}

/// Accuracy of `net` in evaluation mode over the whole dataset.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(HarnessError::Config("evaluation set is empty".into()));
    }
    const CHUNK: usize = 256;
    let mech = Mechanisms::deterministic();
    let mut correct = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, y) = data.batch(chunk, net.precision());
        let pass = net.forward(&x, Mode::Eval, &mech)?;
        correct += accuracy(&pass.logits, &y) * chunk.len() as f64;
    }
    Ok(correct / data.len() as f64)
}

/// Training and held-out sets for a config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let data = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| HarnessError::Config("training needs a dataset".into()))?
        .load()?;
    if let Some(t) = &cfg.test_dataset {
        return Ok((data, Some(t.load()?)));
    }
    if cfg.test_size == 0 {
        return Ok((data, None));
    }
    if cfg.test_size >= data.len() {
        return Err(HarnessError::Config(format!(
            "test_size {} leaves no training data out of {}",
            cfg.test_size,
            data.len()
        )));
    }
    let cut = data.len() - cfg.test_size;
    Ok((data.take(cut), Some(data.skip(cut))))
}

fn min_cf(report: &CorrelationReport, net: &Network, conv_only: bool) -> Option<f64> {
    let kinds: std::collections::HashMap<String, crate::nn::NodeKind> =
        net.nodes().into_iter().map(|n| (n.id, n.kind)).collect();
    report
        .layers
        .iter()
        .filter(|l| !conv_only || kinds.get(&l.layer) == Some(&crate::nn::NodeKind::Conv))
        .filter_map(|l| l.c_f)
        .reduce(f64::min)
}

/// Train one seed, writing rows to `log`. Returns the summary and the
/// trained model.
pub fn train_seed<W: Write>(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &Dataset,
    test: Option<&Dataset>,
    log: &mut MetricsLog<W>,
) -> Result<(RunSummary, Model)> {
    cfg.validate()?;
    if train.len() < cfg.batch_size {
        return Err(HarnessError::Config(format!(
            "batch size {} exceeds {} training examples",
            cfg.batch_size,
            train.len()
        )));
    }
    let mut model = build_model(cfg, seed)?;
    let mech = cfg.mechanisms_for(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(hash2(seed, DATA_ORDER_STREAM));
    let per_epoch = (train.len() / cfg.batch_size) as u64;
    let total = cfg
        .max_steps
        .map_or(per_epoch * cfg.epochs as u64, |m| m.min(per_epoch * cfg.epochs as u64));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_loss = None;
    let mut last_report = None;
    let mut aborted = None;
    let mut step = 0u64;
    while step < total {
        let epoch = (step / per_epoch) as usize;
        let pos = (step % per_epoch) as usize * cfg.batch_size;
        if pos == 0 {
            order.shuffle(&mut rng);
        }
        let (x, y) = train.batch(&order[pos..pos + cfg.batch_size], cfg.precision);
        let net = &mut model.net;
        let pass = net.forward(&x, Mode::Train, &mech)?;
        let (loss, dl) = softmax_cross_entropy(&pass.logits, &y)?;
        if !loss.is_finite() {
            aborted = Some(format!("non-finite loss at step {step}"));
            log.network(seed, step, epoch, ABORT_ROW, Some(loss), None, None)?;
            break;
        }
        let grads = net.backward(&pass, &dl, &mech)?;
        if step.is_multiple_of(cfg.log_interval) {
            let report = correlation_report(net, &pass, Some(&grads));
            log.report(seed, epoch, &report)?;
            log.network(
                seed,
                step,
                epoch,
                NETWORK_ROW,
                Some(loss),
                Some(accuracy(&pass.logits, &y)),
                None,
            )?;
            last_report = Some(report);
        }
        net.absorb_batch_stats(&pass);
        let lr = lr_schedule(epoch, cfg.optimizer.lr, &cfg.optimizer.milestones, cfg.optimizer.decay);
        match sgd_momentum_step(net, &grads, lr, cfg.optimizer.momentum) {
            Ok(()) => {}
            Err(NnError::NonFinite(name)) => {
                aborted = Some(format!("non-finite value in {name} at step {step}"));
                log.network(seed, step, epoch, ABORT_ROW, Some(loss), None, None)?;
                break;
            }
            Err(e) => return Err(e.into()),
        }
        last_loss = Some(loss);
        step += 1;
    }
    let epoch = (step / per_epoch.max(1)) as usize;
    let (train_acc, test_acc) = if aborted.is_none() {
        // Closing report on the first training batch without dropout.
        let idx: Vec<usize> = (0..cfg.batch_size).collect();
        let (x, y) = train.batch(&idx, cfg.precision);
        let det = Mechanisms {
            dropout_rate: 0.0,
            ..mech
        };
        let pass = model.net.forward(&x, Mode::Train, &det)?;
        let (_, dl) = softmax_cross_entropy(&pass.logits, &y)?;
        let grads = model.net.backward(&pass, &dl, &det)?;
        let report = correlation_report(&model.net, &pass, Some(&grads));
        log.report(seed, epoch, &report)?;
        last_report = Some(report);
        let train_acc = evaluate(&model.net, train)?;
        let test_acc = test.map(|t| evaluate(&model.net, t)).transpose()?;
        log.network(seed, step, epoch, NETWORK_ROW, last_loss, Some(train_acc), test_acc)?;
        (Some(train_acc), test_acc)
    } else {
        (None, None)
    };
    let summary = RunSummary {
        seed,
        steps: step,
        epochs: epoch,
        final_loss: last_loss,
        train_acc,
        test_acc,
        min_conv_c_f: last_report.as_ref().and_then(|r| min_cf(r, &model.net, true)),
        min_c_f: last_report.as_ref().and_then(|r| min_cf(r, &model.net, false)),
        aborted,
    };
    Ok((summary, model))
}

/// Train every seed of `cfg`, writing `seed_<s>/metrics.csv`,
/// `seed_<s>/summary.json` (and a checkpoint when requested) under `out`,
/// plus `config.json` and `summary.json` for the whole run.
pub fn run_training(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    write_json(&out.join("config.json"), cfg)?;
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        let path = dir.join("metrics.csv");
        let file = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        let mut log = MetricsLog::new(std::io::BufWriter::new(file))?;
        let (summary, model) = train_seed(cfg, seed, &train, test.as_ref(), &mut log)?;
        log.into_inner()?.flush().map_err(|e| HarnessError::io(&path, e))?;
        write_json(&dir.join("summary.json"), &summary)?;
        if cfg.save_checkpoint {
            save_checkpoint(&model.net, Some(&model.arch), &dir, "checkpoint")?;
        }
        summaries.push(summary);
    }
    write_json(&out.join("summary.json"), &summaries)?;
    Ok(summaries)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

/// Path of a seed's metrics file under a run directory.
pub fn metrics_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}")).join("metrics.csv")
}
