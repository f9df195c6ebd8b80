fn main() {
    std::process::exit(vice_core::cli::run());
}
