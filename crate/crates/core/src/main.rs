fn main() {
    std::process::exit(preflab::cli::run(std::env::args_os()));
}
