fn main() {
    std::process::exit(sdde_smp::cli::main_with(std::env::args()));
}
