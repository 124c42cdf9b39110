use std::process::ExitCode;

use clap::Parser;
use segkit::cli::{init_logging, run, Cli};

fn main() -> ExitCode {
    // clap exits with status 2 on invalid usage
    let cli = Cli::parse();
    init_logging(cli.quiet);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("error=\"{e}\"");
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
