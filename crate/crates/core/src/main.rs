use clap::error::ErrorKind;
use clap::Parser;
use trc::cli::{run, Cli};

/// Exit codes: 0 success, 1 usage error, 2 runtime error.
fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                std::process::exit(0);
            }
            _ => {
                let msg = e.to_string();
                let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid usage");
                eprintln!("{line}");
                std::process::exit(1);
            }
        },
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
