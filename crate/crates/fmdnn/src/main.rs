fn main() {
    std::process::exit(fmdnn::cli::run());
}
