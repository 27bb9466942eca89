use clap::Parser;

fn main() {
    let cli = follicle_cli::Cli::parse();
    if let Err(e) = follicle_cli::run(cli) {
        eprintln!("follicle: error: {e:#}");
        std::process::exit(1);
    }
}
