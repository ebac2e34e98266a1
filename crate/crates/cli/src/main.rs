use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(flexsdr_cli::run(std::env::args_os()))
}
