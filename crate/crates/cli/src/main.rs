use clap::Parser;
use ttd_cli::{exit_code, recorded_command, run, Cli};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let command = recorded_command(&args);
    let cli = Cli::parse();
    if let Err(err) = run(cli, command) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
