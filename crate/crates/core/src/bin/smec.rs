fn main() {
    std::process::exit(smec::cli::run(std::env::args_os()));
}
