fn main() {
    std::process::exit(rivae::cli::main_with_args(std::env::args_os()));
}
