fn main() {
    std::process::exit(fbseg::cli::main_with_args(std::env::args_os()));
}
