use clap::Parser;

use lrp_core::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(exit) => exit as i32,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.exit as i32
        }
    };
    std::process::exit(code);
}
