use clap::Parser;

fn main() {
    let cli = lrqc::cli::Cli::parse();
    std::process::exit(lrqc::cli::run(&cli));
}
