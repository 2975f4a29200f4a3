fn main() {
    std::process::exit(ria::cli::main());
}
