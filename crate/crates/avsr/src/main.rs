fn main() {
    env_logger::init();
    std::process::exit(avsr::cli::run());
}
