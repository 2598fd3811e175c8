fn main() {
    std::process::exit(lga_cli::run_from(std::env::args_os()));
}
