fn main() {
    std::process::exit(mcft_cli::run(std::env::args_os()));
}
