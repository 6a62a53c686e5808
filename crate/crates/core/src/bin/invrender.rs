fn main() {
    std::process::exit(invrender::cli::run());
}
