fn main() {
    std::process::exit(ackf_dse::cli::main_with_args(std::env::args_os()));
}
