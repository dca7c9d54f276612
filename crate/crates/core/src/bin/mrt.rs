fn main() {
    std::process::exit(mrt_core::cli::run(std::env::args_os()));
}
