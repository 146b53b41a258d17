fn main() {
    std::process::exit(tamer::cli::main_with_args(std::env::args_os()));
}
