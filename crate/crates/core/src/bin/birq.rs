fn main() {
    std::process::exit(birq::cli::run(std::env::args_os()));
}
