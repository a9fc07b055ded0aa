//! `ekgnet`: train, evaluate, verify and generate data for the expert-kernel
//! 3D DenseNet hyperspectral classifier.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ekgnet::checkpoint::{read_config, Checkpoint};
use ekgnet::experiment::{evaluate_checkpoint, restore, run, Report};
use ekgnet::hsi::{load_cube, save_cube, synthesize_dataset, HsiCube};
use ekgnet::scalar::Scalar;
use ekgnet::train::write_log_csv;
use ekgnet::verify::{run_suite, SuiteReport};
use log::info;

use config::{DataSource, Precision, RunConfig, Settings};

pub const CHECKPOINT_FILE: &str = "checkpoint.ekgc";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const VERIFY_REPORT_FILE: &str = "verify_report.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.ini";
pub const SYNTH_FILE: &str = "synthetic.ekgh";

#[derive(Parser)]
#[command(name = "ekgnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a cube and write a checkpoint, a CSV log and a JSON report.
    Train(Common),
    /// Score a checkpoint on the test split of its data.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the oracle, gradient and property suites.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Comma-separated suites to run (default: all).
        #[arg(long)]
        suites: Option<String>,
    },
    /// Write a synthetic cube in the EKGH format.
    Synth(Common),
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Args)]
struct Common {
    /// `key = value` configuration file with optional `[section]` headers.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    block_size: Option<usize>,
    /// Train:validation:test ratios, e.g. 6:1:3.
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Expert kernels per dynamic convolution.
    #[arg(long)]
    experts: Option<usize>,
    /// Any other configuration entry, as KEY=VALUE (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, found `{kv}`"))?;
            s.set(k.trim(), v.trim())?;
        }
        if let Some(v) = self.seed {
            s.set("seed", v)?;
        }
        if let Some(v) = &self.out {
            s.set("out", v.display())?;
        }
        if let Some(v) = self.precision {
            s.set("precision", v.name())?;
        }
        if let Some(v) = self.block_size {
            s.set("block_size", v)?;
        }
        if let Some(v) = &self.ratios {
            s.set("ratios", v)?;
        }
        if let Some(v) = self.epochs {
            s.set("epochs", v)?;
        }
        if let Some(v) = self.experts {
            s.set("experts", v)?;
        }
        Ok(s)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => c.settings().and_then(cmd_train),
        Command::Eval { common, checkpoint } => {
            common.settings().and_then(|s| cmd_eval(s, &checkpoint))
        }
        Command::Verify { common, suites } => common.settings().and_then(|mut s| {
            if let Some(list) = suites {
                s.set("suites", list)?;
            }
            cmd_verify(s)
        }),
        Command::Synth(c) => c.settings().and_then(cmd_synth),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn load_data(cfg: &RunConfig) -> Result<HsiCube> {
    match &cfg.data {
        Some(DataSource::Cube(path)) => {
            load_cube(path).with_context(|| format!("cannot load cube {}", path.display()))
        }
        Some(DataSource::Synthetic(p)) => Ok(synthesize_dataset(p)?.cube),
        None => bail!("missing config key `cube` (or set `synthetic = true`)"),
    }
}

fn print_report(report: &Report) {
    println!("OA    {:.4}", report.oa);
    println!("AA    {:.4}", report.aa);
    println!("Kappa {:.4}", report.kappa);
    for (c, acc) in report.per_class_accuracy.iter().enumerate() {
        match acc {
            Some(a) => println!("class {:>2}: {a:.4}", c + 1),
            None => println!("class {:>2}: absent", c + 1),
        }
    }
}

fn cmd_train(settings: Settings) -> Result<()> {
    let mut cfg = RunConfig::resolve(settings)?;
    let cube = load_data(&cfg)?;
    cfg.spec.arch.bands = cube.bands;
    cfg.spec.arch.num_classes = cube.num_classes();
    create_out(&cfg.out)?;
    info!(
        "training on `{}` ({}×{}×{} bands, {} classes), seed {}",
        cube.name,
        cube.height,
        cube.width,
        cube.bands,
        cube.num_classes(),
        cfg.spec.seed
    );
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg, &cube),
        Precision::F64 => train_as::<f64>(&cfg, &cube),
    }
}

fn train_as<T: Scalar>(cfg: &RunConfig, cube: &HsiCube) -> Result<()> {
    let mut output = run::<T>(cube, &cfg.spec)?;
    output.report.config.extend(cfg.data_entries());
    output.checkpoint().save(cfg.out.join(CHECKPOINT_FILE))?;
    write_log_csv(cfg.out.join(LOG_FILE), &output.log)?;
    write_json(&cfg.out.join(REPORT_FILE), &output.report)?;
    let mut resolved = Settings::from_recorded(&output.report.config);
    resolved.set("out", cfg.out.display())?;
    fs::write(cfg.out.join(RESOLVED_CONFIG_FILE), resolved.render())?;
    print_report(&output.report);
    println!("artifacts written to {}", cfg.out.display());
    Ok(())
}

fn cmd_eval(overrides: Settings, checkpoint: &Path) -> Result<()> {
    let bytes = fs::read(checkpoint)
        .with_context(|| format!("cannot read checkpoint {}", checkpoint.display()))?;
    let recorded = read_config(&bytes)?;
    // The checkpoint names its own data; a config file or flags may point
    // elsewhere.
    let mut settings = Settings::from_recorded(&recorded);
    if overrides.has_any(&["cube", "synthetic"]) {
        settings
            .0
            .retain(|k, _| k != "cube" && k != "synthetic" && !k.starts_with("synth_"));
    }
    settings.overlay(&overrides);
    let cfg = RunConfig::resolve(settings)?;
    let cube = load_data(&cfg)?;
    let precision = recorded.get("precision").map_or("f32", String::as_str);
    let report = match precision {
        "f32" => eval_as::<f32>(&bytes, &cube)?,
        "f64" => eval_as::<f64>(&bytes, &cube)?,
        other => bail!("checkpoint records unknown precision `{other}`"),
    };
    create_out(&cfg.out)?;
    write_json(&cfg.out.join(EVAL_REPORT_FILE), &report)?;
    print_report(&report);
    Ok(())
}

fn eval_as<T: Scalar>(bytes: &[u8], cube: &HsiCube) -> Result<Report> {
    let ck = Checkpoint::<T>::from_bytes(bytes)?;
    let mut restored = restore(&ck)?;
    Ok(evaluate_checkpoint(&mut restored, cube)?)
}

fn cmd_verify(settings: Settings) -> Result<()> {
    let cfg = RunConfig::resolve(settings)?;
    let mut reports: Vec<SuiteReport> = Vec::new();
    println!(
        "{:<20} {:>7} {:>12} {:>12}  status",
        "suite", "cases", "worst", "tolerance"
    );
    for &suite in &cfg.suites {
        let r = run_suite(suite, cfg.spec.seed)?;
        let tol = r.cases.iter().map(|c| c.tolerance).fold(0.0, f64::max);
        println!(
            "{:<20} {:>7} {:>12.3e} {:>12.1e}  {}",
            suite.name(),
            r.cases.len(),
            r.worst(),
            tol,
            if r.passed() { "pass" } else { "FAIL" }
        );
        reports.push(r);
    }
    if cfg.settings.0.contains_key("out") {
        create_out(&cfg.out)?;
        write_json(&cfg.out.join(VERIFY_REPORT_FILE), &reports)?;
    }
    let failures: Vec<_> = reports
        .iter()
        .flat_map(|r| r.failures().map(move |c| (r.suite, c)))
        .collect();
    if failures.is_empty() {
        return Ok(());
    }
    for (suite, c) in &failures {
        eprintln!(
            "FAIL {suite}: {} — discrepancy {:.3e} > tolerance {:.1e}",
            c.case, c.discrepancy, c.tolerance
        );
    }
    bail!("{} verification case(s) failed", failures.len())
}

fn cmd_synth(settings: Settings) -> Result<()> {
    let mut settings = settings;
    settings.set("synthetic", "true")?;
    let cfg = RunConfig::resolve(settings)?;
    let Some(DataSource::Synthetic(params)) = &cfg.data else {
        bail!("config key `cube` does not apply to `synth`");
    };
    let cube = synthesize_dataset(params)?.cube;
    create_out(&cfg.out)?;
    let path = cfg.out.join(SYNTH_FILE);
    save_cube(&path, &cube)?;
    println!(
        "wrote {} ({} bytes): {}×{} pixels, {} bands, class histogram {:?}",
        path.display(),
        cube.encoded_len(),
        cube.height,
        cube.width,
        cube.bands,
        cube.class_histogram()
    );
    Ok(())
}
