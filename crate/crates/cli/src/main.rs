use std::process::ExitCode;

use clap::Parser;
use riskquant_cli::args::Cli;
use riskquant_cli::commands::run;
use riskquant_cli::threads_from_env;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = threads_from_env(std::env::var("RISKQUANT_THREADS").ok().as_deref()).and_then(|threads| {
        if let Some(n) = threads {
            // Only fails if a global pool already exists, which cannot happen here.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        run(cli)
    });
    match result {
        Ok(outcome) => {
            for w in &outcome.warnings {
                eprintln!("riskquant: {w}");
            }
            ExitCode::from(outcome.code as u8)
        }
        Err(f) => {
            eprintln!("riskquant: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
