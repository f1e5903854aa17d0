use clap::Parser;

fn main() {
    let cli = volprob::cli::Cli::parse();
    if let Err(e) = volprob::cli::run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}
