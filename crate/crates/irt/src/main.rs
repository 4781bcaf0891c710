use clap::Parser;

fn main() {
    let cli = irt::cli::Cli::parse();
    if let Err(e) = irt::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
