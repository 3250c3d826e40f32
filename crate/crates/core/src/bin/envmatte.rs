use std::process::ExitCode;

use envmatte::cli;

fn main() -> ExitCode {
    if let Err(msg) = cli::configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(cli::EXIT_USAGE as u8);
    }
    let code = cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    ExitCode::from(code as u8)
}
