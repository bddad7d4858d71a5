fn main() {
    std::process::exit(ctsir_cli::run(std::env::args_os()));
}
