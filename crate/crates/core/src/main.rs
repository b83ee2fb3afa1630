fn main() {
    std::process::exit(xslu::cli::run(std::env::args_os()));
}
