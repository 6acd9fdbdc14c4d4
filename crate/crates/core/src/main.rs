fn main() {
    std::process::exit(exitgate::cli::run(std::env::args_os()));
}
