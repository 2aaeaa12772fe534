use std::process::ExitCode;

use clap::Parser;
use ddinpaint::cli::{run, Cli};
use ddinpaint::Error;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    match run(cli, &mut out, &mut err) {
        Ok(o) if o.case_failures == 0 => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(e @ Error::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
