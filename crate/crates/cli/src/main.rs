//! `astra-tda` binary.

use clap::Parser;

use astra_tda_cli::{run, Cli, Outcome};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Done { message, artifacts }) => {
            println!("{message}");
            for a in artifacts {
                println!("  wrote {}", a.display());
            }
        }
        Ok(Outcome::Skipped { message }) => println!("notice: {message}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
