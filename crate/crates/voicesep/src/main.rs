fn main() {
    std::process::exit(voicesep::cli::run());
}
