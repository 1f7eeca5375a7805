fn main() { std::process::exit(nestcast::cli::run_from_env()); }
