fn main() {
    std::process::exit(condmoe::harness::cli::main());
}
