fn main() -> std::process::ExitCode {
    advgame::cli::run_from(std::env::args_os())
}
