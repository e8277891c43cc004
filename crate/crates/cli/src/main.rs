use std::process::ExitCode;

use clap::Parser;

use omitopics_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OMITOPICS_LOG", "warn"))
        .format_timestamp(None)
        .init();
    // Usage errors exit 2, help and version exit 0.
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());

    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
