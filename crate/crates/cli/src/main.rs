fn main() {
    std::process::exit(repgan_cli::app::main_with(std::env::args_os()));
}
