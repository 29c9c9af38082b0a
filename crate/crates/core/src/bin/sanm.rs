fn main() {
    std::process::exit(sanm::cli::main_with_args(std::env::args_os()));
}
