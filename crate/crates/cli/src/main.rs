fn main() { std::process::exit(sri_cli::run(std::env::args().collect())); }
