fn main() {
    std::process::exit(clapnp::cli::run_from(std::env::args_os()));
}
