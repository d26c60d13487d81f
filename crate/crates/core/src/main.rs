fn main() {
    std::process::exit(stylepro::cli::run(std::env::args_os()));
}
