fn main() {
    std::process::exit(waiverlab::cli::main_with_args(std::env::args_os()));
}
