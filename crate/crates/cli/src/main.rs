use clap::Parser;

fn main() {
    let cli = hostcap::Cli::parse();
    std::process::exit(hostcap::execute(cli));
}
