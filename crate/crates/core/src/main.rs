fn main() {
    std::process::exit(pseudoweight::cli::main());
}
