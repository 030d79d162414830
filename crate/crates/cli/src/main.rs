use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use protoprompt::config::{Paths, RunConfig, TaskOrder};
use protoprompt::metrics::{AccuracyMatrix, MetricReport};
use protoprompt::pipeline;
use protoprompt::util::Provenance;
use protoprompt::{Error, Result};

/// Prototype-guided prompt learning on a synthetic multi-domain benchmark.
#[derive(Parser)]
#[command(name = "protoprompt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file, or `default` for the shipped config.
    #[arg(long, default_value = "default")]
    config: String,
    /// Put data, pools and reports under this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed (encoder init, pretraining, prompt training, random orders).
    #[arg(long)]
    seed: Option<u64>,
    /// `alphabetical`, `random`, or comma-separated domain names.
    #[arg(long)]
    order: Option<String>,
    /// Ablation override `key=value`; repeatable.
    #[arg(long = "ablation", value_name = "KEY=VALUE")]
    ablations: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(dir) = &self.out {
            cfg.paths = Paths::under(dir);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.order {
            cfg.order = match o.as_str() {
                "alphabetical" | "random" => TaskOrder::Named(o.clone()),
                _ => TaskOrder::Custom(o.split(',').map(|s| s.trim().to_string()).collect()),
            };
        }
        cfg.with_ablations(&self.ablations)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into the data directory.
    GenData(Common),
    /// Initialize and pretrain the frozen dual encoder.
    Pretrain(Common),
    /// Compute per-domain prototypes (written to prototypes.json).
    Prototypes(Common),
    /// Train one prompt component per domain, in task order.
    Train(Common),
    /// Evaluate every stage checkpoint and write the accuracy matrices.
    Eval(Common),
    /// Metrics of an accuracy matrix CSV (fractions or percent).
    Metrics {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Metric reports from the matrices written by `eval`.
    Report(Common),
    /// Full pipeline: gen-data, pretrain, prototypes, train, eval, report.
    Run(Common),
}

fn metrics(matrix: &PathBuf, format: Format) -> Result<String> {
    let text = std::fs::read_to_string(matrix).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(matrix.display().to_string()),
        _ => Error::io(matrix, e),
    })?;
    let m = AccuracyMatrix::from_csv(&text)?;
    let prov = text.lines().find_map(Provenance::parse_csv_comment);
    let r = MetricReport::from_matrix(&m);
    match format {
        Format::Csv => Ok(r.to_csv(prov.as_ref())),
        Format::Json => r.to_json(prov.as_ref()),
    }
}

fn read_summary(cfg: &RunConfig) -> Result<String> {
    let path = cfg.paths.reports.join("summary.csv");
    std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let data = pipeline::generate_data(&cfg)?;
            println!(
                "wrote {} domains of {} categories to {}",
                data.domains.len(),
                cfg.benchmark.categories_per_domain,
                cfg.paths.data.display()
            );
        }
        Command::Pretrain(c) => {
            let cfg = c.load()?;
            let data = pipeline::load_data(&cfg)?;
            let (_, rep) = pipeline::pretrain(&cfg, &data)?;
            println!(
                "encoder written to {}; held-out zero-shot {:.3} (chance {:.3})",
                cfg.paths.encoder().display(),
                rep.heldout_accuracy,
                rep.chance
            );
        }
        Command::Prototypes(c) => {
            let cfg = c.load()?;
            let data = pipeline::load_data(&cfg)?;
            let enc = pipeline::load_encoder(&cfg)?;
            let sets = pipeline::compute_prototypes(&cfg, &enc, &data)?;
            println!("{} prototype sets written to {}", sets.len(), cfg.paths.reports.display());
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let data = pipeline::load_data(&cfg)?;
            let enc = pipeline::load_encoder(&cfg)?;
            let out = pipeline::train(&cfg, &enc, &data)?;
            println!("{} stages written to {}", out.snapshots.len(), cfg.paths.checkpoints().display());
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let data = pipeline::load_data(&cfg)?;
            let enc = pipeline::load_encoder(&cfg)?;
            let stages = pipeline::task_order(&cfg, &data)?.len();
            let snapshots = pipeline::load_snapshots(&cfg, stages)?;
            let eval = pipeline::evaluate(&cfg, &enc, &data, &snapshots)?;
            pipeline::write_matrices(&cfg, &eval)?;
            println!("matrices written to {}", cfg.paths.reports.display());
        }
        Command::Metrics { matrix, format } => print!("{}", metrics(&matrix, format)?),
        Command::Report(c) => {
            let cfg = c.load()?;
            let eval = pipeline::read_matrices(&cfg)?;
            pipeline::write_reports(&cfg, &eval)?;
            print!("{}", read_summary(&cfg)?);
        }
        Command::Run(c) => {
            let cfg = c.load()?;
            let summary = pipeline::run(&cfg)?;
            print!("{}", read_summary(&cfg)?);
            if summary.category_counterpart.is_some() {
                let path = cfg.paths.reports.join("granularity_comparison.csv");
                print!("{}", std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?);
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
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
