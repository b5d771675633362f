fn main() {
    std::process::exit(mvgmp::cli::main_with_args(std::env::args_os()));
}
