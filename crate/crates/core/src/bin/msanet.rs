use std::process::ExitCode;

fn main() -> ExitCode {
    msanet::cli::init_runtime();
    ExitCode::from(msanet::cli::run(std::env::args_os()))
}
