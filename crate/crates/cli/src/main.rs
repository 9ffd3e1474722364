use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(gazebench::app::main_with_args(std::env::args_os()))
}
