use std::process::ExitCode;

fn main() -> ExitCode {
    voxreg::cli::run()
}
