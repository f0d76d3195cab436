fn main() {
    std::process::exit(delayed_fusion::cli::main_with_args(std::env::args_os()));
}
