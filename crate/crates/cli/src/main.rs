use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(ssnp_cli::run(std::env::args_os()))
}
