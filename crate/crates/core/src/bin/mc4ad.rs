fn main() {
    std::process::exit(mc4ad::cli::main_with_args(std::env::args_os()));
}
