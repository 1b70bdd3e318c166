fn main() {
    std::process::exit(npmix::cli::main());
}
