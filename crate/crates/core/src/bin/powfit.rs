fn main() {
    std::process::exit(powfit::cli::main_with_args(std::env::args_os()));
}
