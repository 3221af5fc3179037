use clap::Parser;

use patchcert_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PATCHCERT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(stdout) => print!("{stdout}"),
        Err(e) => {
            eprintln!("{}", e.record());
            std::process::exit(e.exit_code());
        }
    }
}
