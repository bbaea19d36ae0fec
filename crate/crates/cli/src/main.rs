fn main() -> std::process::ExitCode {
    oodinv_cli::main_with_args(std::env::args_os())
}
