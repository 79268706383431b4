fn main() {
    std::process::exit(geohier::cli::main_with_args(std::env::args_os()));
}
