use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thor::data::Split;
use thor::harness::{self, presets, EvalRequest, RunConfig};
use thor::inference::{DecodeConfig, InferenceMode};
use thor::{Error, Result};

/// Stochastic-expert transformers and Mixture-of-Experts baselines on
/// synthetic transduction tasks.
#[derive(Parser)]
#[command(name = "thor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a run and write metrics, telemetry, and checkpoints.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode a split from a checkpoint and report BLEU, exact match, and FLOPs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config the checkpoint must match; defaults to the stored one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeFlags,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Score the references against themselves instead of decoding.
        #[arg(long)]
        self_test: bool,
    },
    /// Tabulate a run's routing telemetry and flag collapse or random routing.
    AnalyzeRouting {
        #[arg(long)]
        run_dir: PathBuf,
        /// Consecutive intervals that count as sustained.
        #[arg(long, default_value_t = 3)]
        window: usize,
        /// Tolerance around 1/N for the random-routing signature.
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
    },
    /// Spread of corpus BLEU and token probabilities across dispatch seeds.
    Variance {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of evaluation runs; seeds are `seed_base..seed_base + runs`.
        #[arg(long, default_value_t = 20)]
        runs: u64,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[command(flatten)]
        decode: DecodeFlags,
        #[arg(long, default_value = "valid")]
        split: Split,
    },
    /// Train one run per alpha and report validation BLEU.
    SweepAlpha {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long, value_delimiter = ',', default_value = "0,2,4,6,8")]
        alphas: Vec<f64>,
    },
    /// List the built-in presets.
    ListPresets {
        /// Print each preset's full config.
        #[arg(long)]
        verbose: bool,
    },
    /// Write a run config's dataset as parallel text files.
    GenData {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigSource {
    /// Start from a built-in preset.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Start from a TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a field by its dotted path, e.g. `--set training.alpha=2`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

impl ConfigSource {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match (&self.preset, &self.config) {
            (Some(name), _) => presets::find(name)?.config,
            (None, Some(path)) => RunConfig::load(path)?,
            (None, None) => {
                return Err(Error::InvalidArgument(
                    "pass --preset NAME or --config FILE".into(),
                ))
            }
        };
        let pairs = self
            .overrides
            .iter()
            .map(|o| {
                o.split_once('=').ok_or_else(|| {
                    Error::InvalidArgument(format!("override `{o}` is not PATH=VALUE"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        config.apply_overrides(pairs)?;
        Ok(config)
    }
}

#[derive(Args)]
struct DecodeFlags {
    #[arg(long)]
    mode: Option<InferenceMode>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    length_penalty: Option<f64>,
    #[arg(long)]
    max_decode_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl DecodeFlags {
    fn apply(&self, base: &DecodeConfig) -> DecodeConfig {
        DecodeConfig {
            mode: self.mode.unwrap_or(base.mode),
            beam_size: self.beam_size.unwrap_or(base.beam_size),
            length_penalty: self.length_penalty.unwrap_or(base.length_penalty),
            max_decode_len: self.max_decode_len.unwrap_or(base.max_decode_len),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

fn stored_decode(checkpoint: &Path) -> Result<DecodeConfig> {
    Ok(harness::Checkpoint::load(checkpoint)?.config.decode)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { source, resume } => {
            let config = source.resolve()?;
            let outcome = harness::train(&config, resume.as_deref())?;
            let dir = harness::resolve_run_dir(&config.run_dir);
            println!("run directory: {}", dir.display());
            if let Some(last) = outcome.losses.last() {
                println!(
                    "step {}: total {:.4} (ce1 {:.4}, ce2 {:.4}, cr {:.4}, aux {:.4})",
                    last.step, last.total, last.ce1, last.ce2, last.cr, last.aux
                );
            }
            if let Some(v) = outcome.final_validation() {
                println!("validation BLEU {:.2}, exact match {:.3}", v.bleu, v.exact_match);
            }
        }
        Command::Eval {
            checkpoint,
            config,
            decode,
            split,
            self_test,
        } => {
            let config = config.map(|p| RunConfig::load(&p)).transpose()?;
            let base = match &config {
                Some(c) => c.decode.clone(),
                None => stored_decode(&checkpoint)?,
            };
            let report = harness::eval(&EvalRequest {
                checkpoint: &checkpoint,
                config: config.as_ref(),
                decode: Some(decode.apply(&base)),
                split,
                self_test,
            })?;
            print_json(&report)?;
        }
        Command::AnalyzeRouting {
            run_dir,
            window,
            delta,
        } => {
            let analysis = harness::analyze_routing(&run_dir, window, delta)?;
            print!("{}", analysis.table);
            for l in &analysis.layers {
                println!(
                    "layer {}: collapse={} random_routing={} final_loads={:?}",
                    l.layer, l.collapsed, l.random_routing, l.final_loads
                );
            }
        }
        Command::Variance {
            checkpoint,
            runs,
            seed_base,
            decode,
            split,
        } => {
            let base = stored_decode(&checkpoint)?;
            let seeds: Vec<u64> = (seed_base..seed_base + runs).collect();
            let report = harness::variance(&checkpoint, &seeds, split, Some(decode.apply(&base)))?;
            print_json(&report)?;
        }
        Command::SweepAlpha { source, alphas } => {
            let config = source.resolve()?;
            let rows = harness::sweep_alpha(&config, &alphas, true)?;
            println!("{:>8} {:>8} {:>8}", "alpha", "bleu", "exact");
            for r in rows {
                println!("{:>8} {:>8.2} {:>8.3}", r.alpha, r.bleu, r.exact_match);
            }
        }
        Command::ListPresets { verbose } => {
            for p in presets::all() {
                println!("{:<30} {}", p.name, p.description);
                if verbose {
                    println!("{}", p.config.to_toml()?);
                }
            }
        }
        Command::GenData { source, out } => {
            let config = source.resolve()?;
            let data = harness::gen_data(&config.task, &out)?;
            println!(
                "wrote {} train / {} valid / {} test pairs to {}",
                data.train.len(),
                data.valid.len(),
                data.test.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
