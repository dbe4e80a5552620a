use clap::Parser;

fn main() {
    let cli = umtra_cli::Cli::parse();
    if let Err(err) = umtra_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
