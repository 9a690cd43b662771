use acformer_cli::{run, Cli};
use acformer_core::error::Error;
use clap::Parser;

/// Exit codes: 2 invalid flags (clap), 3 data/shape/config/io, 4 numeric.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn main() {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
        }
        Err(err) => {
            eprintln!("acformer: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}
