fn main() {
    std::process::exit(mugv::cli::run_command(std::env::args_os()));
}
