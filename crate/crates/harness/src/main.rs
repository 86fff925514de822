fn main() {
    std::process::exit(mmvm_harness::cli::main_with_args(std::env::args_os()));
}
