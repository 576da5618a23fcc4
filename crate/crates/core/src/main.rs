use std::process::ExitCode;

fn main() -> ExitCode {
    geoparam::cli::main_with(std::env::args_os())
}
