fn main() {
    std::process::exit(upit::cli::run(std::env::args_os()));
}
