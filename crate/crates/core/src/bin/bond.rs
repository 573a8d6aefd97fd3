fn main() {
    std::process::exit(bond_core::cli::run(std::env::args().collect()));
}
