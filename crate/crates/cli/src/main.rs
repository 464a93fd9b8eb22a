use clap::Parser;

use mpot::app::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("mpot: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
