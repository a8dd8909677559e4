use clap::Parser;
use edgefreq_cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => print!("{summary}"),
        Err(e) => {
            eprintln!("edgefreq: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
