fn main() {
    std::process::exit(sonoshadow::cli::run(std::env::args_os()));
}
