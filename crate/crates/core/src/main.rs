fn main() {
    std::process::exit(clustered_lasso::cli::main());
}
