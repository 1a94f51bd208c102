use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::records::*;
use crate::data::{generate_dataset, write_dataset, Dataset, Split, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::inference::{corpus_flops, evaluate, score, DecodeConfig, EvalReport};
use crate::routing::{record_all_layers, RoutingTelemetry, TelemetryFragment};
use crate::training::{prediction_variance, LossBreakdown, Trainer, VarianceReport};
use crate::transformer::Model;

/// Environment variable that relocates relative run directories.
pub const RUN_ROOT_ENV: &str = "THOR_RUN_ROOT";

/// Resolves a relative `run_dir` against `$THOR_RUN_ROOT` when it is set.
pub fn resolve_run_dir(run_dir: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if run_dir.is_relative() => PathBuf::from(root).join(run_dir),
        _ => run_dir.to_path_buf(),
    }
}

/// Everything a training run produced.
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub dataset: Dataset,
    pub losses: Vec<LossBreakdown>,
    pub telemetry: Vec<RoutingTelemetry>,
    pub validations: Vec<ValidationRecord>,
    pub best_bleu: Option<f64>,
}

impl TrainOutcome {
    pub fn final_validation(&self) -> Option<&ValidationRecord> {
        self.validations.last()
    }
}

struct Files {
    dir: PathBuf,
    metrics: JsonlWriter,
    telemetry: JsonlWriter,
    validation: JsonlWriter,
}

fn fresh_trainer(config: &RunConfig, dataset: &Dataset) -> Result<Trainer> {
    let model = Model::new(
        config.model.clone(),
        config.experts.clone(),
        config.training.seed,
    )?;
    Trainer::new(model, config.training.clone(), dataset.train.clone())
}

fn drive(
    config: &RunConfig,
    mut trainer: Trainer,
    dataset: Dataset,
    mut files: Option<Files>,
    mut best_bleu: Option<f64>,
) -> Result<TrainOutcome> {
    let mut losses = Vec::new();
    let mut telemetry = Vec::new();
    let mut validations = Vec::new();
    let mut pending: Vec<TelemetryFragment> = Vec::new();
    let total = config.training.total_steps;
    while trainer.step < total {
        let record = trainer.train_step()?;
        let step = trainer.step;
        if let Some(f) = files.as_mut() {
            f.metrics.write(&record.loss)?;
        }
        losses.push(record.loss);
        pending.extend(record.fragments);
        if step.is_multiple_of(config.telemetry_interval) && !pending.is_empty() {
            for t in record_all_layers(step, &pending)? {
                if let Some(f) = files.as_mut() {
                    f.telemetry.write(&t)?;
                }
                telemetry.push(t);
            }
            pending.clear();
        }
        if step.is_multiple_of(config.validate_interval) || step == total {
            let report = evaluate(&trainer.model, &dataset.valid, &config.decode)?;
            let v = ValidationRecord {
                step,
                bleu: report.bleu,
                exact_match: report.exact_match,
            };
            let improved = best_bleu.is_none_or(|b| v.bleu > b);
            if improved {
                best_bleu = Some(v.bleu);
            }
            if let Some(f) = files.as_mut() {
                f.validation.write(&v)?;
                if improved {
                    Checkpoint::capture(&trainer, config, best_bleu).save(&f.dir.join(BEST_CHECKPOINT))?;
                }
            }
            validations.push(v);
        }
    }
    if let Some(mut f) = files {
        f.metrics.flush()?;
        f.telemetry.flush()?;
        f.validation.flush()?;
        Checkpoint::capture(&trainer, config, best_bleu).save(&f.dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        trainer,
        dataset,
        losses,
        telemetry,
        validations,
        best_bleu,
    })
}

/// Trains without touching the file system.
pub fn train_in_memory(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = generate_dataset(&config.task)?;
    let trainer = fresh_trainer(config, &dataset)?;
    drive(config, trainer, dataset, None, None)
}

/// Trains `config` into its run directory, optionally resuming from a checkpoint.
///
/// Writes `config.toml`, the generated data under `data/`, per-step losses,
/// interval telemetry, validation records, and `best.ckpt` / `final.ckpt`.
/// On resume, records past the checkpoint's step are dropped before appending.
pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let dir = resolve_run_dir(&config.run_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let dataset = generate_dataset(&config.task)?;
    write_dataset(&dir.join("data"), &dataset)?;
    config.save(&dir.join(CONFIG_FILE))?;

    let (trainer, best, append) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_resumable(&ck.config, config)?;
            let model = ck.model_for(config)?;
            let mut adam = ck.adam.clone();
            adam.slots.resize(model.store.len(), None);
            let trainer = Trainer::resume(
                model,
                config.training.clone(),
                adam,
                ck.rng,
                ck.step,
                dataset.train.clone(),
            )?;
            truncate_after::<LossBreakdown>(&dir.join(METRICS_FILE), ck.step, |r| r.step)?;
            truncate_after::<RoutingTelemetry>(&dir.join(TELEMETRY_FILE), ck.step, |r| r.step)?;
            truncate_after::<ValidationRecord>(&dir.join(VALIDATION_FILE), ck.step, |r| r.step)?;
            (trainer, ck.best_bleu, true)
        }
        None => (fresh_trainer(config, &dataset)?, None, false),
    };
    let files = Files {
        metrics: JsonlWriter::open(&dir.join(METRICS_FILE), append)?,
        telemetry: JsonlWriter::open(&dir.join(TELEMETRY_FILE), append)?,
        validation: JsonlWriter::open(&dir.join(VALIDATION_FILE), append)?,
        dir,
    };
    drive(config, trainer, dataset, Some(files), best)
}

/// A checkpoint may continue under a config that differs only in run length
/// and bookkeeping, never in model, data, or objective.
fn check_resumable(saved: &RunConfig, config: &RunConfig) -> Result<()> {
    let mut a = saved.clone();
    let mut b = config.clone();
    for c in [&mut a, &mut b] {
        c.training.total_steps = 0;
        c.run_dir = PathBuf::new();
        c.validate_interval = 1;
        c.telemetry_interval = 1;
        c.decode = DecodeConfig::default();
    }
    if a != b {
        return Err(Error::Checkpoint(
            "checkpoint config differs from the run config beyond total_steps, run_dir, intervals, and decode".into(),
        ));
    }
    Ok(())
}

/// Evaluation request for [`eval`].
pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    /// Config whose model must match the checkpoint; defaults to the stored one.
    pub config: Option<&'a RunConfig>,
    pub decode: Option<DecodeConfig>,
    pub split: Split,
    /// Scores the references against themselves instead of decoding.
    pub self_test: bool,
}

pub fn eval(req: &EvalRequest<'_>) -> Result<EvalReport> {
    let ck = Checkpoint::load(req.checkpoint)?;
    let config = req.config.unwrap_or(&ck.config);
    let model = ck.model_for(config)?;
    let decode = req.decode.clone().unwrap_or_else(|| config.decode.clone());
    decode.validate(config.model.max_seq_len)?;
    let dataset = generate_dataset(&config.task)?;
    let examples = dataset.split(req.split);
    if req.self_test {
        let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
        let (bleu, exact_match) = score(&refs, &refs)?;
        let (forward_flops, expert_flops) = corpus_flops(&model, examples, decode.mode, decode.seed)?;
        return Ok(EvalReport {
            mode: decode.mode,
            sentences: examples.len(),
            bleu,
            exact_match,
            forward_flops,
            expert_flops,
        });
    }
    evaluate(&model, examples, &decode)
}

/// Per-layer verdicts of [`analyze_routing`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerVerdict {
    pub layer: usize,
    /// Some expert held more than 90% of the load for `window` consecutive intervals.
    pub collapsed: bool,
    /// Every confidence of the last `window` intervals lies within `delta` of 1/N.
    pub random_routing: bool,
    pub final_loads: Vec<f64>,
    pub final_confidences: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct RoutingAnalysis {
    /// Whitespace-aligned columns: step, layer, loads, confidences.
    pub table: String,
    pub layers: Vec<LayerVerdict>,
}

pub const COLLAPSE_LOAD: f64 = 0.9;

/// Verdicts for telemetry already in memory.
pub fn analyze_telemetry(records: &[RoutingTelemetry], window: usize, delta: f64) -> Result<RoutingAnalysis> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no telemetry records".into()));
    }
    let window = window.max(1);
    let n = records[0].loads.len();
    let mut table = String::new();
    let _ = write!(table, "{:>8} {:>5}", "step", "layer");
    for e in 0..n {
        let _ = write!(table, " {:>8}", format!("load{e}"));
    }
    for e in 0..n {
        let _ = write!(table, " {:>8}", format!("conf{e}"));
    }
    table.push('\n');
    for r in records {
        let _ = write!(table, "{:>8} {:>5}", r.step, r.layer);
        for l in &r.loads {
            let _ = write!(table, " {l:>8.4}");
        }
        for c in &r.confidences {
            match c {
                Some(c) => {
                    let _ = write!(table, " {c:>8.4}");
                }
                None => {
                    let _ = write!(table, " {:>8}", "-");
                }
            }
        }
        table.push('\n');
    }

    let mut layer_ids: Vec<usize> = records.iter().map(|r| r.layer).collect();
    layer_ids.sort_unstable();
    layer_ids.dedup();
    let layers = layer_ids
        .into_iter()
        .map(|layer| {
            let series: Vec<&RoutingTelemetry> = records.iter().filter(|r| r.layer == layer).collect();
            let mut run = 0;
            let mut collapsed = false;
            for r in &series {
                run = if r.max_load() > COLLAPSE_LOAD { run + 1 } else { 0 };
                collapsed |= run >= window;
            }
            let tail = &series[series.len().saturating_sub(window)..];
            let uniform = 1.0 / n as f64;
            let random_routing = tail.iter().all(|r| {
                r.confidences
                    .iter()
                    .all(|c| c.is_some_and(|c| (c - uniform).abs() <= delta))
            });
            let last = series.last().expect("layer has records");
            LayerVerdict {
                layer,
                collapsed,
                random_routing,
                final_loads: last.loads.clone(),
                final_confidences: last.confidences.clone(),
            }
        })
        .collect();
    Ok(RoutingAnalysis { table, layers })
}

/// Reads a run's telemetry and flags collapse and random-routing behavior.
pub fn analyze_routing(run_dir: &Path, window: usize, delta: f64) -> Result<RoutingAnalysis> {
    let path = run_dir.join(TELEMETRY_FILE);
    if !path.exists() {
        return Err(Error::MissingTelemetry(run_dir.to_path_buf()));
    }
    let records: Vec<RoutingTelemetry> = read_jsonl(&path)?;
    if records.is_empty() {
        return Err(Error::MissingTelemetry(run_dir.to_path_buf()));
    }
    analyze_telemetry(&records, window, delta)
}

/// Prediction variance of a checkpoint across evaluation seeds.
pub fn variance(
    checkpoint: &Path,
    seeds: &[u64],
    split: Split,
    decode: Option<DecodeConfig>,
) -> Result<VarianceReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let decode = decode.unwrap_or_else(|| ck.config.decode.clone());
    let dataset = generate_dataset(&ck.config.task)?;
    prediction_variance(&model, dataset.split(split), &decode, seeds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub bleu: f64,
    pub exact_match: f64,
}

/// Trains one run per `alpha` (same seed) and reports final validation BLEU.
/// With `write_runs`, each run lands in `<run_dir>/alpha-<value>`.
pub fn sweep_alpha(base: &RunConfig, alphas: &[f64], write_runs: bool) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("alpha list is empty".into()));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let mut config = base.clone();
            config.training.alpha = alpha;
            config.run_dir = base.run_dir.join(format!("alpha-{alpha}"));
            let outcome = if write_runs {
                train(&config, None)?
            } else {
                train_in_memory(&config)?
            };
            let v = outcome
                .final_validation()
                .copied()
                .expect("the final step is always validated");
            Ok(SweepRow {
                alpha,
                bleu: v.bleu,
                exact_match: v.exact_match,
            })
        })
        .collect()
}

/// Generates a dataset and writes its splits as parallel text files.
pub fn gen_data(spec: &SyntheticTaskSpec, dir: &Path) -> Result<Dataset> {
    let dataset = generate_dataset(spec)?;
    write_dataset(dir, &dataset)?;
    Ok(dataset)
}
