fn main() {
    std::process::exit(normfusion::cli::main());
}
