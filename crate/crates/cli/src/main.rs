use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(io::stderr)
        .init();
    let code = cohort_cli::main_with(std::env::args_os(), &mut io::stdout().lock());
    ExitCode::from(u8::try_from(code).unwrap_or(1))
}
