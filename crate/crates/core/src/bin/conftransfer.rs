fn main() -> std::process::ExitCode {
    conftransfer::cli::main()
}
