use clap::Parser;

fn main() {
    let cli = adsc_cli::Cli::parse();
    if let Err(e) = adsc_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
