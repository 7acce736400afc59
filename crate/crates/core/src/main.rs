fn main() {
    std::process::exit(hetero_akd::cli::main_with_exit_code());
}
