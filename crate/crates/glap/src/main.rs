fn main() {
    std::process::exit(glap::cli::run());
}
