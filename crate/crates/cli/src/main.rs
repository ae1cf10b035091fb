use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    driftcomp_cli::run(driftcomp_cli::Cli::parse())
}
