use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    let cli = anomaly_recon::Cli::parse();
    if let Err(e) = anomaly_recon::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
