//! Command-line front end over [`crate::pipeline`].

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;
use crate::pipeline::{Pipeline, PipelineConfig, StageOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "shapecal", version, about = "Bayesian calibration from deformed interface shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Pipeline config JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's `output`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for forward evaluations, GP restarts and SMC sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Rerun stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    pub force: bool,
    /// Replace every seed in the config.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Synthesize the observed interface from the true parameters.
    GenerateObs,
    /// Evaluate the forward model on the Sobol design.
    DesignEval,
    /// Fit the Gaussian-process surrogate of the log-likelihood.
    FitGp,
    /// Sample the posterior on the surrogate.
    Smc,
    /// Summarize the posterior and export tables.
    Analyze,
    /// Surrogate test error against training-set size.
    GpConvergence,
    /// All calibration stages in order.
    Pipeline,
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::InvalidConfig(_) | Error::InvalidMeasurementSpec(_))
}

/// Runs one invocation and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let config = match &cli.config {
        Some(path) => match PipelineConfig::from_json_file(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("config error: {e}");
                return EXIT_CONFIG;
            }
        },
        None => PipelineConfig::default(),
    };
    let config = match cli.seed_override {
        Some(k) => config.with_seed_override(k),
        None => config,
    };
    let pipeline = match Pipeline::new(config, cli.out, cli.workers, cli.force) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("config error: {e}");
            return if is_config_error(&e) { EXIT_CONFIG } else { EXIT_STAGE };
        }
    };
    let result = match cli.command {
        Command::GenerateObs => pipeline.generate_obs().map(|o| vec![("generate-obs", o)]),
        Command::DesignEval => pipeline.design_eval().map(|o| vec![("design-eval", o)]),
        Command::FitGp => pipeline.fit_gp().map(|o| vec![("fit-gp", o)]),
        Command::Smc => pipeline.smc().map(|o| vec![("smc", o)]),
        Command::Analyze => pipeline.analyze().map(|o| vec![("analyze", o)]),
        Command::GpConvergence => pipeline.gp_convergence().map(|o| vec![("gp-convergence", o)]),
        Command::Pipeline => pipeline.run_all(),
    };
    match result {
        Ok(stages) => {
            for (name, outcome) in stages {
                let what = match outcome {
                    StageOutcome::Ran => "done",
                    StageOutcome::Skipped => "up to date",
                };
                eprintln!("{name}: {what}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("stage failed: {e}");
            if is_config_error(&e) {
                EXIT_CONFIG
            } else {
                EXIT_STAGE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from([
            "shapecal", "smc", "--config", "c.json", "--out", "o", "--workers", "8", "--force",
            "--seed-override", "7",
        ])
        .unwrap();
        assert_eq!(cli.command, Command::Smc);
        assert_eq!((cli.workers, cli.force, cli.seed_override), (8, true, Some(7)));
        assert!(Cli::try_parse_from(["shapecal", "gp-convergence"]).is_ok());
        assert!(Cli::try_parse_from(["shapecal", "bogus"]).is_err());
    }

    #[test]
    fn exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"smc": {"n_particles": 10, "zeta": 2.0, "n_rejuvenation": 1}}"#).unwrap();
        let out = dir.path().join("out");
        let args = |cmd: &str, cfg: &std::path::Path| {
            Cli::try_parse_from([
                "shapecal",
                cmd,
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .unwrap()
        };
        assert_eq!(run(args("pipeline", &bad)), EXIT_CONFIG);
        std::fs::write(&bad, "{not json").unwrap();
        assert_eq!(run(args("pipeline", &bad)), EXIT_CONFIG);
        let failing = dir.path().join("fail.json");
        std::fs::write(&failing, r#"{"observation": {"params": [{"e": 50.0, "nu": 0.3}], "theta": {"v_in": 100.0}}}"#)
            .unwrap();
        assert_eq!(run(args("generate-obs", &failing)), EXIT_STAGE);
        let ok = dir.path().join("ok.json");
        std::fs::write(&ok, "{}").unwrap();
        assert_eq!(run(args("generate-obs", &ok)), EXIT_OK);
        assert_eq!(run(args("fit-gp", &ok)), EXIT_STAGE);
    }
}
