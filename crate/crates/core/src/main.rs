use clap::Parser;

fn main() {
    std::process::exit(shapecal_core::cli::run(shapecal_core::cli::Cli::parse()));
}
