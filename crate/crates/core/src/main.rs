use clap::Parser;

fn main() {
    let cli = airls::cli::Cli::parse();
    std::process::exit(airls::cli::run(cli));
}
