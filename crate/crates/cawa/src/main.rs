fn main() {
    std::process::exit(cawa::cli::run_cli(std::env::args_os()));
}
