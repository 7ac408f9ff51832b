//! `qlandscape <subcommand> --config <path> [--seed U64] [--out DIR] [--workers K] [--override key=value ...]`

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use serde_json::json;

pub use commands::{build_field, build_system, run, Artifact, Manifest};
pub use config::{
    apply_override, parse_state, resolve, CliInputs, ExperimentConfig, ExperimentSpec, FieldSpec,
    LearningSpec, RowSourceSpec, ScheduleSpec, StateChoice, StateSpec, Subcommand, SystemSpec,
};

pub const EXIT_MODULE_ERROR: i32 = 1;
pub const EXIT_CONFIG_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "qlandscape",
    version,
    about = "Control landscape and tomography experiments"
)]
pub struct Args {
    pub subcommand: Subcommand,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Dotted `key=value`; the value is parsed as JSON when possible.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl From<Args> for CliInputs {
    fn from(a: Args) -> Self {
        CliInputs {
            subcommand: Some(a.subcommand),
            config: a.config,
            seed: a.seed,
            out: a.out,
            workers: a.workers,
            overrides: a.overrides,
        }
    }
}

fn error_json(e: &crate::Error) -> String {
    json!({"error": e.kind(), "message": e.to_string()}).to_string()
}

/// Parses arguments, runs, prints the manifest (or an error object) to stdout
/// and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG_ERROR } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve(&args.into()) {
        Ok(c) => c,
        Err(e) => {
            println!("{}", error_json(&e));
            return EXIT_CONFIG_ERROR;
        }
    };
    match run(&cfg) {
        Ok(m) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&m).expect("manifest serializes")
            );
            0
        }
        Err(e) => {
            println!("{}", error_json(&e));
            EXIT_MODULE_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(main_with_args(["qlandscape", "bogus"]), EXIT_CONFIG_ERROR);
        assert_eq!(
            main_with_args([
                "qlandscape",
                "evolve",
                "--out",
                out,
                "--override",
                "field.dt=-1"
            ]),
            EXIT_CONFIG_ERROR
        );
        assert_eq!(
            main_with_args([
                "qlandscape",
                "tomo",
                "--out",
                out,
                "--override",
                "field.n_steps=3",
                "--override",
                "schedule.step=2"
            ]),
            EXIT_MODULE_ERROR
        );
        assert_eq!(
            main_with_args(["qlandscape", "evolve", "--out", out, "--seed", "3"]),
            0
        );
    }
}
