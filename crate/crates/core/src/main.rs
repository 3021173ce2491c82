use clap::Parser;

fn main() {
    let args = falconbc::cli::Args::parse();
    std::process::exit(falconbc::cli::main_with(args));
}
