//! `fairflow`: seeded, manifest-tracked pipeline around the core library.
//!
//! Exit codes: 0 on success, 2 for usage and argument errors, 3 when a
//! required input file is missing or unreadable, 4 when a computation
//! diverges or produces non-finite values.

mod commands;
mod manifest;
mod plots;

use clap::Parser;

use fairflow_core::Error;

#[derive(Parser)]
#[command(
    name = "fairflow",
    version,
    about = "Density-matched invertible encoders with certified fairness bounds"
)]
struct Cli {
    #[command(subcommand)]
    command: commands::Command,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingInput(_)
        | Error::SchemaDrift { .. }
        | Error::FormatVersion { .. }
        | Error::ModelKind { .. }
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => 3,
        Error::NonFinite(_) | Error::Diverged { .. } => 4,
        _ => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = cli.command.run() {
        eprintln!("fairflow: {err}");
        std::process::exit(exit_code(&err));
    }
}
