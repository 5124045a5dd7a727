fn main() {
    std::process::exit(wbsde::cli::main());
}
