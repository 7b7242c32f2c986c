use std::path::PathBuf;
use std::process::ExitCode;

use advrw::adversarial::{Distance, ReweightTarget};
use advrw_cli::config::{ExperimentConfig, Method, Overrides};
use advrw_cli::experiment::{self, AblationAxis};
use advrw_cli::report::percent_cell;
use advrw_cli::{HarnessError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advrw", version, about = "Adversarial reweighting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output root; the run lands in `<out>/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    /// baseline | reweighing | undersampling | oversampling | adversarial
    #[arg(long)]
    method: Option<String>,
    /// Replaces the CSV path of the dataset section.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    t: Option<f64>,
    /// wasserstein | mmd
    #[arg(long)]
    distance: Option<String>,
    /// majority | minority | both
    #[arg(long)]
    target: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every repetition; write the aggregated table.
    Run(Common),
    /// Repeat the run for several values of T.
    SweepT {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,10")]
        values: Vec<f64>,
    },
    /// Repeat the run for several label-noise ratios (baseline and
    /// adversarial unless --method is given).
    SweepNoise {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
        ratios: Vec<f64>,
    },
    /// One run per arm of an ablation axis: distance | reweight_target.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
    },
    /// Exact W1 before and after reweighting, from a finished run.
    ReportDistances(Common),
    /// Baseline and configured method on a multi-level sensitive attribute.
    MultiGroup(Common),
}

fn parse_distance(s: &str) -> Result<Distance> {
    match s {
        "wasserstein" => Ok(Distance::Wasserstein),
        "mmd" => Ok(Distance::Mmd),
        _ => Err(HarnessError::Config(format!("unknown distance {s:?}"))),
    }
}

fn parse_target(s: &str) -> Result<ReweightTarget> {
    match s {
        "majority" => Ok(ReweightTarget::Majority),
        "minority" => Ok(ReweightTarget::Minority),
        "both" => Ok(ReweightTarget::Both),
        _ => Err(HarnessError::Config(format!("unknown reweight target {s:?}"))),
    }
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&c.config)?;
    cfg.apply(&Overrides {
        out: c.out.clone(),
        seed: c.seed,
        reps: c.reps,
        method: c.method.as_deref().map(Method::parse).transpose()?,
        dataset: c.dataset.clone(),
        t: c.t,
        distance: c.distance.as_deref().map(parse_distance).transpose()?,
        target: c.target.as_deref().map(parse_target).transpose()?,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn print_row(label: &str, row: &advrw_cli::report::Row) {
    println!(
        "{label:<24} accuracy {:<12} disparate impact {:<12} |DI| {}",
        percent_cell(Some(row.accuracy)),
        percent_cell(Some(row.disparate_impact)),
        percent_cell(Some(row.abs_disparate_impact)),
    );
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load(&c)?;
            let (_, row) = experiment::run(&cfg)?;
            print_row(cfg.method.name(), &row);
            println!("results in {}", cfg.run_dir().display());
        }
        Command::SweepT { common, values } => {
            let cfg = load(&common)?;
            for (t, _, row) in experiment::sweep_t(&cfg, &values)? {
                print_row(&format!("T = {t}"), &row);
            }
        }
        Command::SweepNoise { common, ratios } => {
            let cfg = load(&common)?;
            let methods = match &common.method {
                Some(_) => vec![cfg.method],
                None => vec![Method::Baseline, Method::Adversarial],
            };
            for (m, ratio, _, row) in experiment::sweep_noise(&cfg, &ratios, &methods)? {
                print_row(&format!("{} noise {ratio}", m.name()), &row);
            }
        }
        Command::Ablate { common, axis } => {
            let cfg = load(&common)?;
            for (arm, _, row) in experiment::ablate(&cfg, AblationAxis::parse(&axis)?)? {
                print_row(&arm, &row);
                if let Some(w1) = row.final_w1 {
                    println!("{:<24} final W1 {:.3} ({:.3})", "", w1.mean, w1.sd);
                }
            }
        }
        Command::ReportDistances(c) => {
            let cfg = load(&c)?;
            let report = experiment::report_distances(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serialisable"));
        }
        Command::MultiGroup(c) => {
            let cfg = load(&c)?;
            for (m, _, row) in experiment::multi_group(&cfg)? {
                print_row(m.name(), &row);
                if let Some(d) = row.pair_disparate_impact {
                    println!("{:<24} pair disparate impact {}", "", percent_cell(Some(d)));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
