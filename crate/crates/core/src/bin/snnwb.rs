use std::process::ExitCode;

use clap::Parser;
use snn_workbench::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    // configuration comes from flags only; the environment is not consulted
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{}", out.text);
            println!("run directory: {}", out.run_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
