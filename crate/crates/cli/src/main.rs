use clap::Parser;

fn main() {
    let cli = ivusnet_cli::Cli::parse();
    if let Err(e) = ivusnet_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
