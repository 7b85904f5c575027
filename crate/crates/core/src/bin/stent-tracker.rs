use clap::Parser;
use stent_tracker::cli::{exit_code, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STENT_TRACKER_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(summary) => print!("{summary}"),
        Err(e) => {
            eprintln!("stent-tracker: error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
