fn main() {
    misspec::cli::init_logging();
    std::process::exit(misspec::cli::run(std::env::args_os()));
}
