fn main() {
    std::process::exit(nhans::cli::run(std::env::args_os()));
}
