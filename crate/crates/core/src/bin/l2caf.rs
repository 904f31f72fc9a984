fn main() {
    std::process::exit(l2caf_core::cli::run(std::env::args_os()));
}
