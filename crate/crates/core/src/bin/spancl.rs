fn main() {
    std::process::exit(spancl::cli::main_with_args(std::env::args_os()));
}
