use clap::Parser;

fn main() {
    let cli = aitok_cli::cli::Cli::parse();
    if let Err(e) = aitok_cli::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(aitok_cli::exit_code(&e));
    }
}
