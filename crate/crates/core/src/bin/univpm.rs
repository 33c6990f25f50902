use clap::Parser;

use univpm::cli::{self, Cli};

fn main() {
    match cli::run(Cli::parse()) {
        Ok(msg) => println!("{msg}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
