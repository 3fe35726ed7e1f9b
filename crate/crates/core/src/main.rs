fn main() {
    std::process::exit(cascade_router::cli::run(std::env::args_os()));
}
