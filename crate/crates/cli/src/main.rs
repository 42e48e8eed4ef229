use std::io::Write;

use clap::Parser;
use mixforge_cli::{error_json, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{summary}");
        }
        Err(err) => {
            eprintln!("{}", error_json(&err));
            std::process::exit(1);
        }
    }
}
