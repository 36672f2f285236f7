use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tempmix::data::{format_timestamp, parse_timestamp};
use tempmix_cli::config::parse_assignment;
use tempmix_cli::{commands, CliError, CliResult, RunConfig};

/// Outlier-robust temperature interpolation with a mixture density network.
#[derive(Debug, Parser)]
#[command(name = "tempmix", version)]
struct Cli {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (overrides the file and --set).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the file and --set).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world: DEM, labelled observations, ground truth.
    Synth,
    /// Train the model and write a checkpoint.
    Train {
        /// Continue from the checkpoint's optimizer state.
        #[arg(long)]
        resume: bool,
    },
    /// Score predictions on one fold.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Predict mean and uncertainty rasters at one instant.
    Grid {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// UTC instant, e.g. 2020-10-27T12:00:00Z.
        #[arg(long)]
        time: Option<String>,
    },
    /// Per-reading and per-site outlier responsibilities.
    DetectOutliers {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Observation CSV to score (default: the configured observations).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// List every configuration key with its default.
    Keys,
}

fn run(cli: Cli) -> CliResult<()> {
    if matches!(cli.command, Command::Keys) {
        print!("{}", RunConfig::describe_keys());
        return Ok(());
    }
    let sets = cli.sets.iter().map(|s| parse_assignment(s)).collect::<CliResult<Vec<_>>>()?;
    let cfg = RunConfig::resolve(cli.config.as_deref(), &sets, cli.seed, cli.out.as_deref())?;
    match cli.command {
        Command::Synth => {
            let s = commands::synth(&cfg)?;
            println!(
                "wrote {} readings from {} sites ({} faulty) to {}",
                s.n_observations,
                s.n_sites,
                s.n_faulty,
                cfg.out_dir().display()
            );
        }
        Command::Train { resume } => {
            let s = commands::train(&cfg, resume)?;
            println!(
                "trained {} epochs on {} readings; train_nll={} eval_nll={}; checkpoint {}",
                s.epochs_done,
                s.n_train,
                s.final_train_nll.map_or("none".into(), |v| v.to_string()),
                s.final_eval_nll.map_or("none".into(), |v| v.to_string()),
                s.checkpoint.display()
            );
        }
        Command::Evaluate { checkpoint, fold } => {
            let s = commands::evaluate(&cfg, checkpoint.as_deref(), fold)?;
            let r = &s.report;
            println!(
                "fold {}: n={} rmse={} r2={} crps={} pit_ks={}",
                s.fold, r.n_obs, r.rmse, r.r2, r.crps, r.pit_ks
            );
            if let Some(c) = &s.clean {
                println!(
                    "clean readings: n={} rmse={} r2={} crps={} pit_ks={}",
                    c.n_obs, c.rmse, c.r2, c.crps, c.pit_ks
                );
            }
        }
        Command::Grid { checkpoint, time } => {
            let time = time
                .map(|t| parse_timestamp(&t).ok_or_else(|| CliError::Usage(format!("cannot parse time {t:?}"))))
                .transpose()?;
            let s = commands::grid(&cfg, checkpoint.as_deref(), time)?;
            println!(
                "wrote {} files for {} (in_window={})",
                s.files.len(),
                format_timestamp(&s.time),
                s.in_window
            );
        }
        Command::DetectOutliers { checkpoint, dataset } => {
            let s = commands::detect_outliers(&cfg, checkpoint.as_deref(), dataset.as_deref())?;
            println!(
                "scored {} readings from {} sites; skipped {} sites",
                s.n_scored,
                s.sites_scored,
                s.skipped_sites.len()
            );
            if let Some(a) = s.site_auc {
                println!("site-averaged responsibility AUC {a}");
            }
        }
        Command::Keys => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            eprintln!("{e}");
            eprintln!("error[usage]: {msg}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
