use clap::Parser;

fn main() {
    std::process::exit(egue_cli::run(egue_cli::Cli::parse()));
}
