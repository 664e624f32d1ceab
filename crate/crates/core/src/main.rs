use std::process::ExitCode;

fn main() -> ExitCode {
    splitgame::cli::run(std::env::args_os())
}
