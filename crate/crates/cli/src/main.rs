use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use scarwid_core::config::validate_config;
use scarwid_core::fusion::FusionMode;
use scarwid_core::pipeline::{run_stage, Layout, Stage};

/// Runs one stage of the wound-infection pipeline.
#[derive(Debug, Parser)]
#[command(name = "scarwid", version)]
struct Cli {
    /// gen-toy, caption, train-captioner, train-fusion, build-support,
    /// classify, evaluate or explain.
    #[arg(value_parser = parse_stage)]
    stage: Stage,
    /// JSON configuration; an empty file means all defaults.
    #[arg(long)]
    config: PathBuf,
    /// Output root, overriding `paths.output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed, overriding `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Fusion input mode, overriding `fusion.mode`.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<FusionMode>,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: scarwid_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|e: scarwid_core::Error| e.to_string())
}

fn run(cli: Cli) -> scarwid_core::Result<()> {
    let mut cfg = validate_config(&cli.config)?;
    if let Some(out) = cli.out {
        cfg.paths.output = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.fusion.mode = mode;
    }
    let manifest = run_stage(cli.stage, &cfg)?;
    let path = Layout::new(&cfg.paths.output).run_manifest(cli.stage);
    println!("{} {} {}", cli.stage, manifest.run_hash, path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e {
                scarwid_core::Error::Validation(problems) => {
                    eprintln!("error: invalid configuration");
                    for p in problems {
                        eprintln!("  {p}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::FAILURE
        }
    }
}
