fn main() {
    std::process::exit(sobolev_cli::main_with_args(std::env::args_os()));
}
