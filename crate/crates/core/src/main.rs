use clap::Parser;
use mjls_core::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
