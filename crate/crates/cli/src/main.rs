use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = aslsr_cli::Cli::parse();
    if let Err(e) = aslsr_cli::run(&cli) {
        eprintln!("error [{}]: {e}", cli.command.name());
        std::process::exit(aslsr_cli::exit_code(&e));
    }
}
