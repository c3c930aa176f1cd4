fn main() -> std::process::ExitCode {
    sslchrono::cli::main_entry()
}
