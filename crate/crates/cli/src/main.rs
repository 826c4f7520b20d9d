//! `aggcate`: transport trial treatment effects to a target population from
//! aggregate data.

use std::process::ExitCode;

use aggcate_cli::Cli;
use clap::Parser;

fn init_logging(level: &str) {
    let _ = env_logger::Builder::new().parse_filters(level).format_timestamp(None).try_init();
}

fn main() -> ExitCode {
    let args = match aggcate_cli::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let cli = Cli::parse_from(args);
    init_logging(&cli.log_level);
    match aggcate_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
