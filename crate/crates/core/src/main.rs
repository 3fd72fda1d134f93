fn main() {
    std::process::exit(hybrid_enkf::cli::run_from_args(std::env::args_os()));
}
