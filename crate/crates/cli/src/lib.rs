//! The `finenet` command-line tool.
//!
//! Every failure is reported as one line on stderr, `error[<category>]:
//! <message>`, where the category is one of `usage`, `invalid-argument`,
//! `config`, `data`, `data-missing`, `dependency`, `version`, `io` or
//! `gradcheck`. Usage errors exit with status 2, all others with 1.

pub mod args;
pub mod commands;
pub mod settings;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

pub use args::Cli;

/// Failures that only the command-line tool reports.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Gradcheck(String),
}

/// Machine-readable category of an error chain.
pub fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<finenet_core::Error>() {
            return e.category();
        }
        if let Some(CliError::Gradcheck(_)) = cause.downcast_ref::<CliError>() {
            return "gradcheck";
        }
    }
    "error"
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            eprintln!("error[usage]: a subcommand is required; see --help");
            return 2;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return 2;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match commands::execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", category(&e), one_line(&format!("{e:#}")));
            1
        }
    }
}
