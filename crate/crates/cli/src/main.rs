use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = hdan_cli::Cli::parse();
    hdan_cli::init_logging(cli.quiet);
    match hdan_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
