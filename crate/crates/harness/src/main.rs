fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = asdfd_harness::cli::main_with_args(args);
    asdfd_harness::cli::write_audit_log_from_env();
    std::process::exit(code);
}
