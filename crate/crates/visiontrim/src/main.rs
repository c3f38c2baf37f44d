use std::process::ExitCode;

fn main() -> ExitCode {
    visiontrim::cli::main_entry()
}
