//! Command-line front end for the cross-view matching pipeline.
//!
//! The binary is a thin wrapper; every subcommand is a function in
//! [`commands`] taking a parsed [`config::RunConfig`].

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crossview_core::eval::ReportFormat;
use crossview_core::{Error, Result};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "crossview", version, about = "Ground-to-aerial image matching pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `fov` (degrees in (0, 360]).
    #[arg(long, global = true)]
    pub fov: Option<f64>,
    /// Overrides `paths.output`.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the manifest, compute statistics and cache normalized tensors.
    Preprocess,
    /// Write aerial and ground features of every cached sample.
    Extract,
    /// Rank the gallery for one query id.
    Match {
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Train on the cached training split.
    Train,
    /// Compute recall reports on the test split.
    Eval {
        /// FoVs of the trained models to load (default: `fov`).
        #[arg(long, value_delimiter = ',')]
        trained_fov: Vec<f64>,
        /// FoVs of the ground queries (default: `fov`).
        #[arg(long, value_delimiter = ',')]
        tested_fov: Vec<f64>,
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Generate a toy dataset and config into `--output`.
    Synth {
        #[arg(long, default_value_t = 32)]
        count: usize,
    },
}

impl Cli {
    /// The config file with command-line overrides applied.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let cwd = std::path::Path::new(".");
        if let Some(s) = self.common.seed {
            cfg.set("seed", &s.to_string(), cwd)?;
        }
        if let Some(f) = self.common.fov {
            cfg.set("fov", &f.to_string(), cwd)?;
        }
        if let Some(o) = &self.common.output {
            cfg.paths.output = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Executes the parsed command and returns the text to print on success.
pub fn run(cli: &Cli) -> Result<String> {
    use std::fmt::Write as _;
    let mut out = String::new();
    match &cli.command {
        Command::Synth { count } => {
            let dir = cli
                .common
                .output
                .clone()
                .ok_or_else(|| Error::InvalidArgument("`synth` needs --output DIR".into()))?;
            let cfg = commands::cmd_synth(&dir, *count, cli.common.seed.unwrap_or(0))?;
            let _ = writeln!(out, "wrote {count} toy triplets; config at {}", cfg.display());
        }
        Command::Preprocess => {
            let s = commands::cmd_preprocess(&cli.run_config()?)?;
            let _ = writeln!(
                out,
                "preprocessed {} samples: {} new, {} unchanged, {} rewritten",
                s.samples, s.created, s.unchanged, s.replaced
            );
        }
        Command::Extract => {
            let s = commands::cmd_extract(&cli.run_config()?)?;
            let _ = writeln!(
                out,
                "extracted {} entries to {} (aerial {:?}, ground {:?})",
                s.entries,
                s.path.display(),
                s.aerial_shape,
                s.ground_shape
            );
        }
        Command::Match { query, k } => {
            let s = commands::cmd_match(&cli.run_config()?, query, *k)?;
            let _ = writeln!(out, "query {} (crop offset {}), top {}:", s.query, s.query_offset, s.k);
            let _ = writeln!(out, "rank\tid\tdistance\torientation_deg");
            for (i, m) in s.ranked.iter().enumerate() {
                let _ = writeln!(out, "{}\t{}\t{:.6}\t{:.3}", i + 1, m.id, m.distance, m.orientation_deg);
            }
        }
        Command::Train => {
            let s = commands::cmd_train(&cli.run_config()?)?;
            let first = s.loss_history.first().copied().unwrap_or(f64::NAN);
            let last = s.loss_history.last().copied().unwrap_or(f64::NAN);
            let _ = writeln!(
                out,
                "trained {} epochs (loss {first:.6} -> {last:.6}); checkpoint {}",
                s.loss_history.len(),
                s.checkpoint.display()
            );
        }
        Command::Eval {
            trained_fov,
            tested_fov,
            format,
        } => {
            let format: ReportFormat = format.parse()?;
            let s = commands::cmd_eval(&cli.run_config()?, trained_fov, tested_fov, format)?;
            let _ = writeln!(out, "trained\ttested\tr@1\tr@5\tr@10\tr@1%");
            for c in &s.cells {
                let r = |l: &str| c.report.recall(l).unwrap_or(f64::NAN);
                let _ = writeln!(
                    out,
                    "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                    c.trained_fov,
                    c.tested_fov,
                    r("r@1"),
                    r("r@5"),
                    r("r@10"),
                    r("r@1%")
                );
            }
        }
    }
    Ok(out)
}

/// Single-line JSON error for machine consumption.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string()
}
