fn main() {
    std::process::exit(quark::cli::run(std::env::args_os()));
}
