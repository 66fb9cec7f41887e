fn main() {
    std::process::exit(pma_cli::app::run(std::env::args_os()));
}
