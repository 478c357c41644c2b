fn main() {
    std::process::exit(finecls::cli::run());
}
