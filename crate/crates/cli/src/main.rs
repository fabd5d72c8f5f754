use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use isonas_core::concentration::{deviation_experiment, TheoremConfig};
use isonas_core::harness::{
    emit_reports, run_pipeline, run_stages, ExperimentConfig, Stage, CONCENTRATION_JSON, ISOMETRY_CSV,
};
use isonas_core::supernet::IsometryReport;
use isonas_core::Error;
use log::{info, warn};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "isonas", version, about = "Isometric fair architecture search at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every run seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Jacobian spectrum of every candidate block in the configured space.
    AnalyzeIsometry(Common),
    /// Build the supernet and train its indicators.
    TrainSupernet(Common),
    /// Turn trained indicators into the score table.
    Score(Common),
    /// Rank subnets under the configured constraint.
    Search(Common),
    /// Retrain the ranked subnets from their initialization.
    Retrain(Common),
    /// Monte Carlo check of the concentration bound.
    VerifyTheorem(Common),
    /// Emit plot data from a run directory.
    Report(Common),
    /// Run the whole pipeline, optionally starting at a later stage.
    Run {
        #[command(flatten)]
        common: Common,
        /// First stage to run: init, train, score, search, retrain, report.
        #[arg(long, default_value = "init")]
        stage: String,
    },
}

fn experiment(c: &Common) -> Result<ExperimentConfig, Error> {
    let path = c
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn theorem_config(c: &Common) -> Result<TheoremConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => TheoremConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from("runs/latest"))
}

fn analyze_isometry(c: &Common) -> Result<(), Error> {
    let cfg = experiment(c)?;
    let (train, _) = cfg.datasets()?;
    let space = cfg.search_space(&train)?;
    let report = IsometryReport::for_space(&space, &cfg.init, cfg.seed).map_err(|e| e.in_stage("analyze-isometry"))?;
    fs::create_dir_all(&cfg.out)?;
    report.write_csv(fs::File::create(cfg.out.join(ISOMETRY_CSV))?)?;
    fs::write(cfg.out.join("isometry.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    for b in &report.blocks {
        info!(
            "{} (d={}, n={}): phi {:.4} trace_var {:.4} {}",
            b.label,
            b.channels,
            b.size,
            b.stats.phi,
            b.stats.trace_var,
            if b.verdict.pass { "pass" } else { "fail" }
        );
    }
    if !report.all_pass() {
        warn!("some blocks fail the isometry check");
    }
    Ok(())
}

fn verify_theorem(c: &Common) -> Result<(), Error> {
    let cfg = theorem_config(c)?;
    let out = out_dir(c);
    let report = deviation_experiment(&cfg).map_err(|e| e.in_stage("verify-theorem"))?;
    fs::create_dir_all(&out)?;
    report.write_csv(fs::File::create(out.join("concentration.csv"))?)?;
    fs::write(out.join(CONCENTRATION_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    info!(
        "eps {:.4}, slope {:.5}, R^2 {:.4}, bound dominates: {}",
        report.eps_dev,
        report.slope,
        report.r_squared,
        report.bound_dominates()
    );
    Ok(())
}

fn report(dir: &Path) -> Result<(), Error> {
    let m = emit_reports(dir)?;
    if m.emitted.is_empty() {
        warn!("nothing to report in {}", dir.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::AnalyzeIsometry(c) => analyze_isometry(&c),
        Command::TrainSupernet(c) => run_stages(&experiment(&c)?, &[Stage::Init, Stage::Train]).map(drop),
        Command::Score(c) => run_stages(&experiment(&c)?, &[Stage::Score]).map(drop),
        Command::Search(c) => run_stages(&experiment(&c)?, &[Stage::Search]).map(drop),
        Command::Retrain(c) => run_stages(&experiment(&c)?, &[Stage::Retrain]).map(drop),
        Command::VerifyTheorem(c) => verify_theorem(&c),
        Command::Report(c) => {
            let dir = match (&c.out, &c.config) {
                (Some(o), _) => o.clone(),
                (None, Some(_)) => experiment(&c)?.out,
                (None, None) => out_dir(&c),
            };
            report(&dir)
        }
        Command::Run { common, stage } => {
            let from: Stage = stage.parse()?;
            let m = run_pipeline(&experiment(&common)?, from)?;
            info!("space size {}, stages {:?}", m.space_size, m.stages);
            Ok(())
        }
    }
}

fn is_config_error(e: &Error) -> bool {
    match e {
        Error::Config(_) => true,
        Error::Stage { source, .. } => is_config_error(source),
        _ => false,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ISONAS_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { EXIT_STAGE })
        }
    }
}
