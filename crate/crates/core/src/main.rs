fn main() {
    std::process::exit(hamr::cli::run(std::env::args_os()));
}
