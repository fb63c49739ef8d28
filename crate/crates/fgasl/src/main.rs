fn main() -> std::process::ExitCode {
    fgasl::cli::main()
}
