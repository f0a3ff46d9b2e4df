use std::io::Write;
use std::process::ExitCode;

use bdm::cli::{error_line, exit_code, run, Cli, EXIT_CONFIG};
use bdm::error::BdmError;
use clap::Parser;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": first }));
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run(&cli) {
        Ok(outcome) => {
            let written = match &outcome.out_path {
                Some(p) => std::fs::write(p, &outcome.output).map_err(|e| BdmError::Io(format!("{}: {e}", p.display()))),
                None => std::io::stdout().write_all(outcome.output.as_bytes()).map_err(|e| BdmError::Io(e.to_string())),
            };
            match written {
                Ok(()) => ExitCode::from(outcome.exit_code as u8),
                Err(e) => fail(&e),
            }
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &BdmError) -> ExitCode {
    eprintln!("{}", error_line(e));
    ExitCode::from(exit_code(e) as u8)
}
