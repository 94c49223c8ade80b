fn main() {
    std::process::exit(netfold::cli::run());
}
