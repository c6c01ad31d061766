fn main() {
    std::process::exit(loramerge::cli::run(std::env::args_os()));
}
