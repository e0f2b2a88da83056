use std::process::ExitCode;

fn main() -> ExitCode {
    xald::cli::main_from(std::env::args_os())
}
