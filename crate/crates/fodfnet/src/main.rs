fn main() {
    std::process::exit(fodfnet::cli::main_with_args(std::env::args_os()));
}
