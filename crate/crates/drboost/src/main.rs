fn main() {
    std::process::exit(drboost::cli::run_from_env());
}
