use std::process::ExitCode;

use clap::Parser;
use scorefpe_cli::{run, Cli, CommandKind};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(m) => {
            for a in &m.artifacts {
                println!("{}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("scorefpe {}: {f}", CommandKind::from(cli.command).name());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
