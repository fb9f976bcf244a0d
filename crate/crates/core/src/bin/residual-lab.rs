fn main() {
    std::process::exit(residual_lab::cli::run(std::env::args_os()));
}
