fn main() {
    std::process::exit(aspect_transfer_cli::main_with_args(std::env::args_os()));
}
