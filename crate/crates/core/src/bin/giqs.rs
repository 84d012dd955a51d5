fn main() {
    std::process::exit(giqs::cli::main_with_args(std::env::args_os()));
}
