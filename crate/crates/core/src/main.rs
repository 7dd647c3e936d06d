fn main() {
    std::process::exit(laplace_kit::cli::run(std::env::args_os()));
}
