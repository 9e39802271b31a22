use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let executor = match ringseq_cli::executor_from_env() {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(ringseq_cli::EXIT_INVALID as u8);
        }
    };
    let code = ringseq_cli::run(
        std::env::args_os(),
        executor,
        &mut io::stdout().lock(),
        &mut io::stderr().lock(),
    );
    ExitCode::from(code as u8)
}
