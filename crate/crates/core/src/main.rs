use clap::Parser;

fn main() {
    let cli = fedmac::cli::Cli::parse();
    std::process::exit(fedmac::cli::execute(cli));
}
