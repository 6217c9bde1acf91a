fn main() {
    std::process::exit(setpred::cli::main_with_args(std::env::args_os()));
}
