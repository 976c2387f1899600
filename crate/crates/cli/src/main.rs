fn main() -> std::process::ExitCode {
    kpeq_cli::run(std::env::args_os())
}
