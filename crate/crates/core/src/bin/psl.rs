fn main() {
    std::process::exit(psl_core::cli::run(std::env::args_os()));
}
