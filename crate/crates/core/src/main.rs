fn main() {
    std::process::exit(anyad::cli::run(std::env::args_os()));
}
