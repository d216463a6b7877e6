use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gridar_core::experiment::{gen_suite, pilot_study, replay_report, run_compare, write_csv, write_json, VerifierKind};
use gridar_core::{ExperimentConfig, ExperimentReport, GuidanceMode};

#[derive(Parser)]
#[command(name = "gridar", version, about = "Staged grid generation experiments on a toy scene model")]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Overrides {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Stage band counts, e.g. `4,2`.
    #[arg(long, global = true, value_parser = parse_plan)]
    plan: Option<(usize, usize)>,
    #[arg(long, global = true)]
    guidance: Option<GuidanceMode>,
    #[arg(long, global = true)]
    verifier: Option<VerifierKind>,
    /// Remote verifier URL.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the configured prompt suite.
    Suite,
    /// Success-within-k curves from frozen upper halves.
    Pilot,
    /// Run the method matrix and write report.json and outcomes.csv.
    Compare,
    /// Rerun a saved report and check it reproduces byte for byte.
    Replay { report: PathBuf },
}

fn parse_plan(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected R1,R2")?;
    let r1 = a.trim().parse().map_err(|_| format!("bad R1 `{a}`"))?;
    let r2 = b.trim().parse().map_err(|_| format!("bad R2 `{b}`"))?;
    Ok((r1, r2))
}

impl Overrides {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.suite.master_seed = seed;
        }
        if let Some((r1, r2)) = self.plan {
            cfg.plan.r1 = r1;
            cfg.plan.r2 = r2;
        }
        if let Some(mode) = self.guidance {
            cfg.plan.guidance.mode = mode;
        }
        if let Some(kind) = self.verifier {
            cfg.verifier.kind = kind;
        }
        if let Some(url) = &self.endpoint {
            cfg.verifier.remote.endpoint = url.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(dir: &Path) -> Result<&Path> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn print_summary(report: &ExperimentReport) {
    println!("{:<38} {:>3} {:>8} {:>17} {:>10} {:>10} {:>8}", "method", "N", "success", "95% CI", "tokens", "forwards", "verify");
    for m in &report.methods {
        println!(
            "{:<38} {:>3} {:>8.3} {:>8.3}-{:<8.3} {:>10} {:>10} {:>8}",
            m.method.to_string(),
            m.n,
            m.success_rate,
            m.ci_low,
            m.ci_high,
            m.ledger.generated_tokens,
            m.ledger.forward_passes(),
            m.ledger.verifier_calls
        );
    }
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.cmd {
        Cmd::Suite => {
            let cfg = cli.opts.config()?;
            for p in gen_suite(&cfg.suite, &cfg.palette())? {
                println!("{}\t{}\t{}", p.id, p.category, p.prompt);
            }
        }
        Cmd::Pilot => {
            let cfg = cli.opts.config()?;
            let dir = out_dir(&cli.opts.out)?;
            let report = pilot_study(&cfg)?;
            let csv = report.to_csv()?;
            fs::write(dir.join("pilot.csv"), &csv)?;
            fs::write(dir.join("pilot.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            print!("{csv}");
            log::info!("wrote {}", dir.join("pilot.csv").display());
        }
        Cmd::Compare => {
            let cfg = cli.opts.config()?;
            let dir = out_dir(&cli.opts.out)?;
            let report = run_compare(&cfg)?;
            write_json(&report, &dir.join("report.json"))?;
            write_csv(&report, &dir.join("outcomes.csv"))?;
            print_summary(&report);
            log::info!("wrote {}", dir.join("report.json").display());
        }
        Cmd::Replay { report } => {
            let dir = out_dir(&cli.opts.out)?;
            let (again, same) = replay_report(report)?;
            write_json(&again, &dir.join("report.json"))?;
            write_csv(&again, &dir.join("outcomes.csv"))?;
            print_summary(&again);
            if !same {
                eprintln!("replay differs from {}", report.display());
                return Ok(false);
            }
            println!("replay matches {}", report.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if matches!(cli.cmd, Cmd::Replay { .. }) && cli.opts.config.is_some() {
        eprintln!("error: replay takes its config from the report");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
