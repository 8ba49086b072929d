//! Command-line front end. Every subcommand prints one JSON object on stdout;
//! logs go to stderr.

mod commands;
mod settings;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

#[derive(Debug, Parser)]
#[command(name = "svdcomp", version, about = "Differentiable rank selection and SVD compression for toy models")]
struct Cli {
    #[command(subcommand)]
    command: commands::Command,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => settings::EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    match commands::run(cli.command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summaries serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
