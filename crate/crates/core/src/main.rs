use std::process::ExitCode;

fn main() -> ExitCode {
    ternsense::cli::main_with_args(std::env::args_os())
}
