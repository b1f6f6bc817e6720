fn main() {
    std::process::exit(opatomo::cli::run());
}
