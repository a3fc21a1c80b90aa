fn main() -> std::process::ExitCode {
    tlsekit::cli::main()
}
