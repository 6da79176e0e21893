use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use xmd_core::ablation::ablate;
use xmd_core::data::{generate, Dataset, DatasetSpec};
use xmd_core::eval::{evaluate, Direction, RetrievalMetrics};
use xmd_core::grad::gradient_suite;
use xmd_core::persist::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_summary, MetricsWriter, RunConfig};
use xmd_core::trainer::{run, Variant};
use xmd_core::Error;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "xmd", version, about = "Unsupervised visible-infrared representation learning with modality debiasing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset container.
    Gen {
        /// JSON run config; only its `data` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant, writing metrics.jsonl, checkpoint.xmd and summary.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the test split in both directions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
    /// Train several variants over several seeds and report medians.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant names; all seven when omitted.
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variants: Option<Vec<Variant>>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure classes mapped to exit codes.
enum Failure {
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Numeric(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?),
        None => Ok(RunConfig::default()),
    }
}

/// Dataset plus the palette count used for confusion analysis, taken from the
/// stored spec when present.
fn load_data(path: &Path, fallback: &DatasetSpec) -> Result<(Dataset, usize), Failure> {
    let (ds, spec) = load_dataset(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let palettes = spec.map_or(fallback.palette_count, |s| s.palette_count);
    Ok((ds, palettes))
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

#[derive(Serialize)]
struct EvalOutput {
    i2v: RetrievalMetrics,
    v2i: RetrievalMetrics,
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Gen { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = generate(&cfg.data)?;
            save_dataset(&out, &ds, Some(&cfg.data))?;
            info!("wrote {} images to {}", ds.images.len(), out.display());
        }
        Command::Train { config, data, out, variant, seed } => {
            let cfg = load_config(config.as_deref())?;
            let (ds, palettes) = load_data(&data, &cfg.data)?;
            let mut train = cfg.train;
            if let Some(v) = variant {
                train = train.with_variant(v);
            }
            if let Some(s) = seed {
                train.seed = s;
            }
            train.encoder.input_dim = ds.images.first().map_or(train.encoder.input_dim, |i| i.pixels.len());
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let metrics_path = out.join("metrics.jsonl");
            let file = File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
            let mut writer = MetricsWriter::new(BufWriter::new(file));
            let result = run(&train, &ds, palettes, |r| writer.write(r))?;
            save_checkpoint(&out.join("checkpoint.xmd"), &result.params, &train)?;
            write_summary(&out.join("summary.json"), &result.summary)?;
            print_json(&result.summary);
        }
        Command::Eval { checkpoint, data } => {
            let (params, _) = load_checkpoint(&checkpoint).map_err(|e| Failure::Data(format!("{}: {e}", checkpoint.display())))?;
            let (ds, _) = load_data(&data, &DatasetSpec::default())?;
            print_json(&EvalOutput {
                i2v: evaluate(&params, &ds, Direction::InfraredToVisible)?,
                v2i: evaluate(&params, &ds, Direction::VisibleToInfrared)?,
            });
        }
        Command::Gradcheck { points, seed, step } => {
            if !(1e-6..=1e-2).contains(&step) {
                return Err(Failure::Data(format!("step must lie in [1e-6, 1e-2], got {step}")));
            }
            let results = gradient_suite(points, seed, step)?;
            let mut worst = 0.0f64;
            for r in &results {
                println!("{:8} max_rel_error {:.3e} over {} points", r.term, r.max_rel_error, r.points);
                worst = worst.max(r.max_rel_error);
            }
            if worst >= GRADCHECK_TOLERANCE {
                return Err(Failure::Numeric(format!("max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}")));
            }
        }
        Command::Ablate { config, data, seeds, out, variants } => {
            let cfg = load_config(config.as_deref())?;
            let (ds, palettes) = load_data(&data, &cfg.data)?;
            let mut train = cfg.train;
            train.encoder.input_dim = ds.images.first().map_or(train.encoder.input_dim, |i| i.pixels.len());
            let variants = variants.unwrap_or_else(|| Variant::ALL.to_vec());
            let seeds: Vec<u64> = (0..seeds).collect();
            let report = ablate(&train, &ds, palettes, &variants, &seeds, |v, r| {
                info!("{v} seed {}: rank-1 {:.3} in {:.1}s", r.seed, r.summary.i2v.rank1, r.seconds);
            })?;
            let text = serde_json::to_string_pretty(&report).expect("serializable");
            fs::write(&out, text + "\n").map_err(|e| io_err(&out, e))?;
            for r in &report.variants {
                println!("{:14} rank-1 {:.3} mAP {:.3} homogeneity {:.3}", r.name, r.median.rank1_i2v, r.median.map_i2v, r.median.final_homogeneity);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
