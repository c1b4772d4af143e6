fn main() {
    std::process::exit(udarts::cli::main_from_args(std::env::args_os()));
}
