fn main() {
    std::process::exit(crossview::cli::main());
}
