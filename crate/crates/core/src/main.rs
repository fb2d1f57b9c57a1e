fn main() {
    segrefine::cli::init_logging();
    std::process::exit(segrefine::cli::run_from(std::env::args_os()));
}
