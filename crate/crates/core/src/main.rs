use std::process::ExitCode;

fn main() -> ExitCode {
    sdsfield::cli::run()
}
