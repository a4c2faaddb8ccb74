fn main() {
    std::process::exit(mdpde::cli::run(std::env::args_os()));
}
