fn main() {
    std::process::exit(usrecon::cli::run(std::env::args_os()));
}
