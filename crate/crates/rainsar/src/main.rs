use clap::Parser;

use rainsar::cli::{run, Cli};

fn main() {
    // Argument errors exit 2 via clap; subcommand failures map their own
    // exit codes (2 validation, 3 data, 4 numeric).
    let cli = Cli::parse();
    std::process::exit(run(cli));
}
