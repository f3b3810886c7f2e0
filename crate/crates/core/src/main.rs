fn main() {
    std::process::exit(msf1d::cli::main_entry(std::env::args()));
}
