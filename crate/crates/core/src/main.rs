fn main() {
    std::process::exit(patchssl::cli::run(std::env::args_os()));
}
