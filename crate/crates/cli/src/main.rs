fn main() {
    std::process::exit(callback_elr_cli::run_cli(std::env::args_os()));
}
