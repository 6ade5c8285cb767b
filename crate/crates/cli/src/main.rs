use clap::error::ErrorKind;
use clap::Parser;
use sls_cli::{apply_thread_limit, error::EXIT_INPUT, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_INPUT,
            };
            std::process::exit(code);
        }
    };
    let level = if cli.common.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    apply_thread_limit();
    std::process::exit(run(cli));
}
