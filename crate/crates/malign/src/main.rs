fn main() {
    std::process::exit(malign::cli::main_with_args(std::env::args_os()));
}
