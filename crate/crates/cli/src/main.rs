mod config;
mod modes;

use std::process::ExitCode;

use clap::Parser;

use config::{Flags, Mode, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: exit 2.
    Usage(String),
    /// A suite, metric or file-level failure: exit 1.
    Failed(String),
    Run(itse::error::Error),
}

impl From<itse::error::Error> for CliError {
    fn from(e: itse::error::Error) -> Self {
        use itse::error::Error as E;
        match e {
            E::Input(msg) => CliError::Usage(msg),
            E::Scene(msg) => CliError::Usage(format!("scene spec: {msg}")),
            other => CliError::Run(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) | CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage: {msg}"),
            CliError::Failed(msg) => f.write_str(msg),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

fn run(cfg: &RunConfig) -> Result<(), CliError> {
    match cfg.mode {
        Mode::Check => modes::check(cfg),
        Mode::Overfit => modes::overfit(cfg),
        Mode::Infer => modes::infer(cfg),
        Mode::Eval => modes::eval(cfg),
        Mode::DumpFixtures => modes::dump_fixtures(cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let flags = match Flags::try_parse() {
        Ok(f) => f,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match RunConfig::resolve(flags).and_then(|cfg| run(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
