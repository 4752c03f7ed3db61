fn main() {
    std::process::exit(cdrca::cli::run_cli(std::env::args_os()));
}
