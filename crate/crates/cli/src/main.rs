use std::io::IsTerminal;

use clap::Parser;
use distractor_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let level: tracing::Level = cli.log_level.parse().unwrap_or(tracing::Level::INFO);
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    if let Err(e) = run(&cli, None) {
        eprintln!("{e}");
        std::process::exit(e.category.exit_code());
    }
}
