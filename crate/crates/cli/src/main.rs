use std::process::ExitCode;

fn main() -> ExitCode {
    roireg_cli::main_with_args(std::env::args())
}
