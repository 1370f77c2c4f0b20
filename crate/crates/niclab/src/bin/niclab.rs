fn main() {
    std::process::exit(niclab::cli::run(std::env::args_os()));
}
