fn main() {
    env_logger::init();
    std::process::exit(multipot::cli::run(std::env::args_os()));
}
