use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(vtprune::cli::run(std::env::args_os()))
}
