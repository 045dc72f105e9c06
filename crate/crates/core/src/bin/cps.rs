use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cps::data::export_domain;
use cps::nn::Module;
use cps::harness::{evaluate, pretrain, train_continual, Checkpoint, EvalMode, MetricsReport, RunConfig, SequentialData};

#[derive(Parser)]
#[command(name = "cps", version, about = "Continual person search with a prompt pool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pops,
    Oracle,
    #[value(name = "ft_seq")]
    FtSeq,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Warm up the backbone and train the detector; writes a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn every configured domain in order from a pretrained checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate all stages of a trained checkpoint; writes a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a report as JSON or CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Print the default run configuration.
    DefaultConfig,
    /// Write the configured synthetic domains to disk.
    ExportData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<RunConfig, Box<dyn std::error::Error>> {
    Ok(RunConfig::from_json(&std::fs::read_to_string(path)?)?)
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let cfg = load_config(&config)?;
            let ckpt = pretrain(&cfg)?;
            ckpt.save(&out)?;
            eprintln!("backbone {}", ckpt.model.backbone.digest());
        }
        Command::Train { config, ckpt, out } => {
            let cfg = load_config(&config)?;
            let pre = Checkpoint::load(&ckpt)?;
            let data = SequentialData::generate(&cfg)?;
            let (trained, log) = train_continual(&cfg, &pre, &data)?;
            trained.save(&out)?;
            for d in &log.domains {
                if let (Some(first), Some(last)) = (d.epochs.first(), d.epochs.last()) {
                    eprintln!("domain {}: loss {:.4} -> {:.4}", d.domain_id, first.total, last.total);
                }
            }
        }
        Command::Eval { ckpt, mode, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let data = SequentialData::generate(&ckpt.config)?;
            let mode = match mode {
                Mode::Pops => EvalMode::Pops,
                Mode::Oracle => EvalMode::Oracle,
                Mode::FtSeq => EvalMode::FtSeq,
            };
            let report = evaluate(&ckpt, data.test_domains(), mode)?;
            std::fs::write(&out, report.to_json())?;
        }
        Command::Report { input, format } => {
            let report = MetricsReport::from_json(&std::fs::read_to_string(input)?)?;
            let text = match format {
                Format::Json => report.to_json(),
                Format::Csv => report.to_csv(),
            };
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
        }
        Command::DefaultConfig => println!("{}", RunConfig::default().to_json()),
        Command::ExportData { config, out_dir } => {
            let cfg = load_config(&config)?;
            let data = SequentialData::generate(&cfg)?;
            for d in data.test_domains() {
                export_domain(d, &out_dir)?;
            }
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
