fn main() {
    std::process::exit(mantis_core::cli::main_with_args(std::env::args_os()));
}
