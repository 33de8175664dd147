fn main() {
    std::process::exit(hikfs::cli::main_with_args(std::env::args_os()));
}
