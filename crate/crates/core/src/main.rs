fn main() {
    std::process::exit(qlandscape::cli::main_with_args(std::env::args_os()));
}
