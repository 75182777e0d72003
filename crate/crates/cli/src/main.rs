use std::process::ExitCode;

fn main() -> ExitCode {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    crisp_cli::main_with(std::env::args_os(), &mut lock)
}
