//! `applefl` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use apple_fl::config::{Algorithm, RunConfig};
use apple_fl::error::{Error, Result};
use apple_fl::experiment::{
    self, evaluate_checkpoint, export_charts, load_data, make_split, Checkpoint, ManifestFile,
    TrainOptions,
};
use apple_fl::metrics::format_real;

const DEFAULT_OUTPUT_DIR: &str = "output";

#[derive(Parser)]
#[command(
    name = "applefl",
    version,
    about = "Personalized cross-silo federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the configured dataset and write a reusable split manifest.
    Partition(PartitionArgs),
    /// Run an experiment and write metrics.csv, dr_trace.csv and checkpoint.json.
    Train(TrainArgs),
    /// Recompute per-client test accuracy from a checkpoint.
    Eval(EvalArgs),
    /// Render SVG charts from metrics.csv and dr_trace.csv.
    Export(ExportArgs),
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    config: PathBuf,
    /// Manifest path (default: <output dir>/manifest.json).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "APPLEFL_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Scalar overrides applied on top of the JSON config.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    lr_net: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lr_dr: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    momentum: Option<f64>,
    /// DR penalty coefficient.
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    mu_prox: Option<f64>,
    /// Peer downloads per client per round.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn is_empty(&self) -> bool {
        self.algorithm.is_none()
            && self.rounds.is_none()
            && self.local_epochs.is_none()
            && self.batch_size.is_none()
            && self.lr_net.is_none()
            && self.lr_dr.is_none()
            && self.momentum.is_none()
            && self.mu.is_none()
            && self.mu_prox.is_none()
            && self.budget.is_none()
            && self.seed.is_none()
    }

    fn apply(&self, config: &mut RunConfig) -> Result<()> {
        if let Some(a) = &self.algorithm {
            config.algorithm = a.parse::<Algorithm>()?;
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            rounds => config.rounds,
            local_epochs => config.local_epochs,
            batch_size => config.batch_size,
            lr_net => config.lr_net,
            lr_dr => config.lr_dr,
            momentum => config.momentum,
            mu => config.scheduler.mu,
            mu_prox => config.mu_prox,
            seed => config.seed,
        );
        if let Some(m) = self.budget {
            config.budget = Some(m);
        }
        config.validate()
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config (not needed with --resume).
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    /// Worker threads for per-client training; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, env = "APPLEFL_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Continue from a checkpoint, appending to its metrics files.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Also checkpoint after every K rounds.
    #[arg(long, value_name = "K")]
    checkpoint_every: Option<usize>,
    /// Stop after this round (the checkpoint allows resuming later).
    #[arg(long, value_name = "ROUND")]
    stop_after: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    dr_trace: Option<PathBuf>,
    /// Directory for the SVG files (default: next to metrics.csv).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut config = RunConfig::from_path(path)?;
    overrides.apply(&mut config)?;
    Ok(config)
}

fn output_dir(flag: Option<PathBuf>, config: &RunConfig) -> PathBuf {
    flag.or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn cmd_partition(args: PartitionArgs) -> Result<()> {
    let config = load_config(&args.config, &args.overrides)?;
    let (train, test) = load_data(&config)?;
    let split = make_split(&config, &train, &test)?;
    let out = match args.out {
        Some(p) => p,
        None => output_dir(args.output_dir, &config).join("manifest.json"),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = ManifestFile {
        config,
        manifest: split.manifest(),
    };
    let text = serde_json::to_string_pretty(&file).expect("manifest serializes");
    apple_fl::metrics::write_text(&out, &text)?;
    for (i, c) in split.clients.iter().enumerate() {
        println!("client {i}: {} train, {} test", c.train.len(), c.test.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (config, resume) = match &args.resume {
        Some(path) => {
            if !args.overrides.is_empty() {
                return Err(Error::config("overrides cannot be combined with --resume"));
            }
            let ckpt = Checkpoint::read(path)?;
            (ckpt.config.clone(), Some((ckpt, path.clone())))
        }
        None => {
            let path = args.config.as_deref().expect("clap requires --config");
            (load_config(path, &args.overrides)?, None)
        }
    };
    let dir = match (&args.output_dir, &resume) {
        (Some(d), _) => d.clone(),
        (None, Some((_, ckpt_path))) => ckpt_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
        (None, None) => output_dir(None, &config),
    };
    let opts = TrainOptions {
        workers: args.workers.max(1),
        output_dir: dir,
        resume: resume.map(|(c, _)| c),
        checkpoint_every: args.checkpoint_every,
        stop_after: args.stop_after,
    };
    let summary = experiment::train(&config, &opts)?;
    println!(
        "{}: completed {}/{} rounds{}",
        config.algorithm.tag(),
        summary.completed_rounds,
        config.rounds,
        if summary.finished {
            ""
        } else {
            " (stopped early)"
        }
    );
    if !summary.rows.is_empty() {
        println!("BMCTA (this invocation): {:.4}", summary.bmcta()?);
    }
    println!("metrics: {}", summary.metrics_path.display());
    if let Some(p) = &summary.dr_trace_path {
        println!("dr trace: {}", p.display());
    }
    println!("checkpoint: {}", summary.checkpoint_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::read(&args.checkpoint)?;
    let acc = evaluate_checkpoint(&ckpt)?;
    println!("client,test_accuracy");
    for (i, a) in acc.iter().enumerate() {
        println!("{i},{}", format_real(*a));
    }
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    eprintln!("mean client test accuracy: {mean:.4}");
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let out_dir = args.out_dir.unwrap_or_else(|| {
        args.metrics
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    for p in export_charts(&args.metrics, args.dr_trace.as_deref(), &out_dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Partition(a) => cmd_partition(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
