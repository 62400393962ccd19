use clap::Parser;

fn main() {
    let cli = carsac::cli::Cli::parse();
    if let Err(e) = carsac::cli::run(cli) {
        eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
        std::process::exit(1);
    }
}
