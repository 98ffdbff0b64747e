fn main() {
    std::process::exit(nmfnet::cli::run(std::env::args_os().collect()));
}
