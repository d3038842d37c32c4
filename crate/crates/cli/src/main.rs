use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(geemvc::main_with_args(std::env::args_os()))
}
