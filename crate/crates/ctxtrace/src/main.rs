fn main() {
    std::process::exit(ctxtrace::cli::run());
}
