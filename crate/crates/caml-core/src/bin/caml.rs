fn main() {
    std::process::exit(caml_core::cli::run());
}
