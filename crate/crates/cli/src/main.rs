fn main() {
    std::process::exit(qttie_cli::main_with_args(std::env::args_os()));
}
