fn main() {
    std::process::exit(dacrf::cli::main());
}
