fn main() {
    std::process::exit(bnnadv::cli::main());
}
