use std::process::ExitCode;

use clap::Parser;

use bindattn_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(manifest) => {
            for o in &manifest.outputs {
                println!("{}  {}", o.sha256, o.path);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("bindattn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
