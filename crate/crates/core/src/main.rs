fn main() {
    std::process::exit(qlower::cli::main());
}
