fn main() -> std::process::ExitCode {
    landmark_cli::main_with_args(std::env::args_os())
}
