use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(xalign_cli::run(std::env::args_os()))
}
