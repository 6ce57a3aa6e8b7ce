fn main() {
    std::process::exit(riskdrl::cli::main_with_args(std::env::args().collect()));
}
