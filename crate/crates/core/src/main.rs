use clap::Parser;

fn main() {
    let cli = himeta::cli::Cli::parse();
    std::process::exit(himeta::cli::run(cli));
}
