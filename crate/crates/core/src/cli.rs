//! Command-line front end: dataset synthesis, training, evaluation,
//! inference, verification suites and the memory/speed bench.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bench::{run_bench, to_csv};
use crate::check::{run_all, run_suite, CheckOptions, CheckReport};
use crate::config::{Precision, Preset, RunConfig, VAL_SEED_OFFSET};
use crate::data::{load_samples, read_pgm, write_dataset, write_pfm, write_pgm, StereoSample};
use crate::error::{Error, Result};
use crate::model::{match_intensities, predict, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};
use crate::train::{eval_metrics, train_loop, EvalRecord, MetricsReport, TrainOutputs};
use crate::transport::OTConfig;

/// Exit status of a run that completed but failed verification.
pub const EXIT_VERIFICATION: i32 = 1;
/// Exit status of bad input, bad configuration, IO errors and divergence.
pub const EXIT_INPUT: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Parser)]
#[command(name = "s2s-stereo", version, about = "Stereo disparity by epipolar attention and optimal transport")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; keys override the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base configuration: paper, lightweight or toy (default toy).
    #[arg(long, global = true, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    /// Master seed for training order, scenes and benches.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and validation random-dot datasets.
    Synth,
    /// Train a model and write a checkpoint and a metrics log.
    Train {
        /// Training manifest; scenes are generated when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Validation manifest; scenes are generated when absent.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Continue from these parameters instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the configured number of steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Metrics of a checkpoint on a dataset.
    Eval {
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation manifest; validation scenes are generated when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Score the ground truth itself instead of model predictions.
        #[arg(long)]
        oracle: bool,
    },
    /// Disparity and occlusion maps for one image pair.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Output file prefix inside the output directory.
        #[arg(long, default_value = "pred")]
        prefix: String,
        /// Match raw intensities instead of running the learned network.
        #[arg(long)]
        oracle: bool,
    },
    /// Run the verification suites; exits with 1 if any fails.
    Check {
        /// Run only these suites (repeatable).
        #[arg(long)]
        suite: Vec<String>,
        /// Corrupt gradient rules, as a negative control.
        #[arg(long)]
        fault_injection: bool,
    },
    /// Attention memory and timing over widths and strides.
    Bench {
        #[arg(long, value_delimiter = ',')]
        widths: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        strides: Vec<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Outcome of a command that ran to completion.
pub enum Outcome {
    Success,
    VerificationFailed(String),
}

/// Resolves the configuration from `--config`, `--preset` and `--seed`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut doc = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None => json!({}),
    };
    if let Some(p) = cli.preset {
        doc["preset"] = serde_json::to_value(p)?;
    }
    let mut cfg = RunConfig::from_value(doc, Preset::Toy)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.data.train_seed = seed;
        cfg.data.val_seed = seed.wrapping_add(VAL_SEED_OFFSET);
    }
    Ok(cfg)
}

/// Worker-thread cap from `S2S_THREADS` (default 1). Every kernel runs on
/// the calling thread, so the value only needs to be valid.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("S2S_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("S2S_THREADS must be a positive integer, got {v:?}"))),
    }
}

/// Parses the arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    match run(&cli) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::VerificationFailed(msg)) => {
            eprintln!("verification failed: {msg}");
            EXIT_VERIFICATION
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    thread_cap()?;
    let cfg = resolve_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, out).map(|_| Outcome::Success),
        Command::Train {
            manifest,
            val,
            resume,
            steps,
        } => {
            let mut cfg = cfg;
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            let args = TrainArgs {
                manifest: manifest.as_deref(),
                val: val.as_deref(),
                resume: resume.as_deref(),
            };
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(&cfg, &args, out),
                Precision::F64 => cmd_train::<f64>(&cfg, &args, out),
            }
            .map(|_| Outcome::Success)
        }
        Command::Eval {
            checkpoint,
            manifest,
            oracle,
        } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            let report = match cfg.precision {
                Precision::F32 => cmd_eval::<f32>(&cfg, &ckpt, manifest.as_deref(), *oracle, out),
                Precision::F64 => cmd_eval::<f64>(&cfg, &ckpt, manifest.as_deref(), *oracle, out),
            }?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(Outcome::Success)
        }
        Command::Infer {
            checkpoint,
            left,
            right,
            prefix,
            oracle,
        } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            let args = InferArgs {
                checkpoint: &ckpt,
                left,
                right,
                prefix,
                oracle: *oracle,
            };
            let files = match cfg.precision {
                Precision::F32 => cmd_infer::<f32>(&cfg, &args, out),
                Precision::F64 => cmd_infer::<f64>(&cfg, &args, out),
            }?;
            println!("{}", serde_json::to_string_pretty(&files)?);
            Ok(Outcome::Success)
        }
        Command::Check {
            suite,
            fault_injection,
        } => {
            let opts = CheckOptions {
                seed: cli.seed.unwrap_or(0),
                fault_injection: *fault_injection,
            };
            let report = cmd_check(&opts, suite, out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.passed {
                Ok(Outcome::Success)
            } else {
                let failed: Vec<&str> = report
                    .suites
                    .iter()
                    .filter(|s| !s.passed)
                    .map(|s| s.name.as_str())
                    .collect();
                Ok(Outcome::VerificationFailed(format!("failing suites: {}", failed.join(", "))))
            }
        }
        Command::Bench {
            widths,
            strides,
            repetitions,
        } => {
            let mut cfg = cfg;
            if !widths.is_empty() {
                cfg.bench.widths = widths.clone();
            }
            if !strides.is_empty() {
                cfg.bench.strides = strides.clone();
            }
            if let Some(r) = repetitions {
                cfg.bench.repetitions = *r;
            }
            cfg.validate()?;
            let csv = cmd_bench(&cfg, cli.seed.unwrap_or(0), out)?;
            print!("{csv}");
            Ok(Outcome::Success)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `train.json` and `val.json` with their files into `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let d = &cfg.data;
    let spec = serde_json::to_value(&d.sampler)?;
    let train = d.sampler.samples(d.train_seed, d.train_count)?;
    let val = d.sampler.samples(d.val_seed, d.val_count)?;
    let tp = write_dataset(out, "train", &train, d.train_seed, spec.clone())?;
    let vp = write_dataset(out, "val", &val, d.val_seed, spec)?;
    eprintln!("wrote {} training and {} validation samples to {}", train.len(), val.len(), out.display());
    Ok((tp, vp))
}

/// Samples from `manifest`, else the configured manifest, else generated.
fn samples_from(manifest: Option<&Path>, configured: Option<&Path>, cfg: &RunConfig, seed: u64, count: usize) -> Result<Vec<StereoSample>> {
    match manifest.or(configured) {
        Some(p) => load_samples(p),
        None => cfg.data.sampler.samples(seed, count),
    }
}

pub struct TrainArgs<'a> {
    pub manifest: Option<&'a Path>,
    pub val: Option<&'a Path>,
    pub resume: Option<&'a Path>,
}

/// Trains and writes the checkpoint, the metrics log and the resolved
/// configuration into `out`; returns the evaluation records.
pub fn cmd_train<F: Scalar>(cfg: &RunConfig, args: &TrainArgs<'_>, out: &Path) -> Result<Vec<EvalRecord>> {
    create_dir(out)?;
    let d = &cfg.data;
    let train = samples_from(args.manifest, d.train_manifest.as_deref(), cfg, d.train_seed, d.train_count)?;
    let val = samples_from(args.val, d.val_manifest.as_deref(), cfg, d.val_seed, d.val_count)?;
    let mut store: ParameterStore<F> = match args.resume {
        Some(p) => load_checkpoint(p, &cfg.model)?,
        None => cfg.model.init(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?,
    };
    write_json(&out.join("config.json"), cfg)?;
    let outputs = TrainOutputs {
        metrics_log: Some(out.join(METRICS_FILE)),
        checkpoint: Some(out.join(CHECKPOINT_FILE)),
    };
    eprintln!(
        "training {} parameters for {} steps on {} samples ({} validation)",
        store.num_elements(),
        cfg.train.steps,
        train.len(),
        val.len()
    );
    let outcome = train_loop(&mut store, &cfg.model, &cfg.train, &cfg.weights, &train, &val, &outputs)?;
    if let Some(last) = outcome.records.last() {
        eprintln!("{}", serde_json::to_string(last)?);
    }
    Ok(outcome.records)
}

/// Loads parameters and checks them against the layout `model` registers.
pub fn load_checkpoint<F: Scalar>(path: &Path, model: &ModelConfig) -> Result<ParameterStore<F>> {
    let store = ParameterStore::<F>::load(path)?;
    let expected: ParameterStore<F> = model.init(&mut ChaCha8Rng::seed_from_u64(0))?;
    let layout = |s: &ParameterStore<F>| -> Vec<(String, Vec<usize>)> {
        s.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect()
    };
    if layout(&store) != layout(&expected) {
        return Err(Error::Parameter(format!(
            "{} does not match the configured model ({} tensors in the file, {} expected)",
            path.display(),
            store.len(),
            expected.len()
        )));
    }
    Ok(store)
}

/// Aggregate and per-sample metrics of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub oracle: bool,
    pub samples: usize,
    pub aggregate: MetricsReport,
    pub per_sample: Vec<MetricsReport>,
    /// Largest ground-truth disparity predicted within 1 px.
    pub max_correct_disparity: Option<f64>,
}

impl EvalReport {
    pub fn from_samples(per_sample: Vec<MetricsReport>, oracle: bool) -> Self {
        let aggregate = MetricsReport::aggregate(&per_sample);
        Self {
            oracle,
            samples: per_sample.len(),
            max_correct_disparity: aggregate.max_correct_disparity,
            aggregate,
            per_sample,
        }
    }
}

/// Evaluates a checkpoint, or the ground truth itself with `oracle`, and
/// writes `eval.json` into `out`.
pub fn cmd_eval<F: Scalar>(cfg: &RunConfig, checkpoint: &Path, manifest: Option<&Path>, oracle: bool, out: &Path) -> Result<EvalReport> {
    let d = &cfg.data;
    let samples = samples_from(manifest, d.val_manifest.as_deref(), cfg, d.val_seed, d.val_count)?;
    let per = if oracle {
        samples
            .iter()
            .map(|s| {
                let occ: Vec<f64> = s.gt_occlusion.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
                eval_metrics(s.gt_disparity.data(), &occ, s.gt_disparity.data(), &s.gt_occlusion)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let store = load_checkpoint::<F>(checkpoint, &cfg.model)?;
        crate::train::evaluate(&store, &cfg.model, &samples)?.1
    };
    let report = EvalReport::from_samples(per, oracle);
    create_dir(out)?;
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}

pub struct InferArgs<'a> {
    pub checkpoint: &'a Path,
    pub left: &'a Path,
    pub right: &'a Path,
    pub prefix: &'a str,
    pub oracle: bool,
}

/// Paths written by one inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferFiles {
    pub disparity: PathBuf,
    pub occlusion: PathBuf,
    pub visualization: PathBuf,
}

/// Disparity relative to the image width as gray levels; pixels with
/// occlusion probability above 0.5 are black.
pub fn disparity_visualization(disparity: &Tensor<f64>, occlusion: &Tensor<f64>) -> Result<Tensor<f64>> {
    if disparity.rank() != 2 || disparity.shape() != occlusion.shape() {
        return Err(Error::dim(
            "disparity_visualization",
            format!("{:?} and {:?}", disparity.shape(), occlusion.shape()),
        ));
    }
    let w = disparity.shape()[1] as f64;
    let data = disparity
        .data()
        .iter()
        .zip(occlusion.data())
        .map(|(&d, &o)| if o > 0.5 { 0.0 } else { (d / w).clamp(0.0, 1.0) })
        .collect();
    Tensor::new(disparity.shape().to_vec(), data)
}

/// Oracle matching on intensities: sharp transport so that well-textured
/// pixels commit to one match.
fn oracle_ot() -> OTConfig {
    OTConfig {
        gamma: 0.1,
        iterations: 50,
        log_domain: true,
    }
}

pub fn cmd_infer<F: Scalar>(cfg: &RunConfig, args: &InferArgs<'_>, out: &Path) -> Result<InferFiles> {
    let (left, right) = (read_pgm(args.left)?, read_pgm(args.right)?);
    if left.shape() != right.shape() {
        return Err(Error::dim(
            "infer",
            format!("left {:?} and right {:?} differ", left.shape(), right.shape()),
        ));
    }
    let (disparity, occlusion) = if args.oracle {
        match_intensities(&left, &right, &oracle_ot(), 1.0)?
    } else {
        if cfg.model.extractor.image_channels != 1 {
            return Err(Error::Config("inference reads grayscale PGM images; image_channels must be 1".into()));
        }
        let store = load_checkpoint::<F>(args.checkpoint, &cfg.model)?;
        let shape = vec![1, left.shape()[0], left.shape()[1]];
        let (l, r) = (left.cast::<F>().reshape(shape.clone())?, right.cast::<F>().reshape(shape)?);
        let (o, _) = predict(&store, &cfg.model, &l, &r)?;
        (o.disparity.cast(), o.occlusion.cast())
    };
    create_dir(out)?;
    let files = InferFiles {
        disparity: out.join(format!("{}_disp.pfm", args.prefix)),
        occlusion: out.join(format!("{}_occ.pgm", args.prefix)),
        visualization: out.join(format!("{}_disp_vis.pgm", args.prefix)),
    };
    write_pfm(&disparity.cast(), &files.disparity)?;
    write_pgm(&occlusion, &files.occlusion)?;
    write_pgm(&disparity_visualization(&disparity, &occlusion)?, &files.visualization)?;
    Ok(files)
}

/// Runs the named suites (all when empty), prints one line per suite to
/// stderr and writes `check.json` into `out`.
pub fn cmd_check(opts: &CheckOptions, suites: &[String], out: &Path) -> Result<CheckReport> {
    let report = if suites.is_empty() {
        run_all(opts)?
    } else {
        let suites = suites.iter().map(|s| run_suite(s, opts)).collect::<Result<Vec<_>>>()?;
        CheckReport {
            passed: suites.iter().all(|s| s.passed),
            suites,
        }
    };
    for s in &report.suites {
        eprintln!(
            "{} {:<26} max error {:.3e} (tolerance {:.1e}, {} cases){}",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.max_error,
            s.tolerance,
            s.cases,
            s.counterexample.as_ref().map(|c| format!(" counterexample {c}")).unwrap_or_default()
        );
    }
    create_dir(out)?;
    write_json(&out.join("check.json"), &report)?;
    Ok(report)
}

/// Runs the bench with the configured transformer and writes `bench.csv`.
pub fn cmd_bench(cfg: &RunConfig, seed: u64, out: &Path) -> Result<String> {
    let rows = match cfg.precision {
        Precision::F32 => run_bench::<f32>(&cfg.model.transformer, &cfg.bench, seed)?,
        Precision::F64 => run_bench::<f64>(&cfg.model.transformer, &cfg.bench, seed)?,
    };
    let csv = to_csv(&rows);
    create_dir(out)?;
    let path = out.join("bench.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("s2s-stereo").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_resolve_into_the_configuration() {
        let cli = parse(&["train", "--preset", "paper", "--seed", "9"]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.preset, Some(Preset::Paper));
        assert_eq!((cfg.train.seed, cfg.data.train_seed), (9, 9));
        assert_eq!(cfg.data.val_seed, 9 + VAL_SEED_OFFSET);
        let cfg = resolve_config(&parse(&["synth"])).unwrap();
        assert_eq!(cfg.preset, Some(Preset::Toy));
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(main_with_args(["s2s-stereo", "frobnicate"]), EXIT_INPUT);
        assert_eq!(main_with_args(["s2s-stereo", "check", "--preset", "huge"]), EXIT_INPUT);
    }

    #[test]
    fn visualization_blacks_out_occlusion() {
        let d = Tensor::from_f64(vec![1, 4], &[0.0, 2.0, 4.0, 8.0]).unwrap();
        let o = Tensor::from_f64(vec![1, 4], &[0.0, 0.9, 0.2, 0.51]).unwrap();
        let v = disparity_visualization(&d, &o).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0, 1.0, 0.0]);
    }
}
