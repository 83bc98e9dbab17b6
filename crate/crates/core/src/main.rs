fn main() {
    std::process::exit(mmuda_core::cli::run(std::env::args_os()));
}
