use clap::Parser;

fn main() {
    let result = agp::cli::run(agp::cli::Cli::parse());
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    std::process::exit(agp::cli::exit_code(&result));
}
