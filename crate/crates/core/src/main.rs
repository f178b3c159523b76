fn main() {
    std::process::exit(sidemoe::cli::main());
}
