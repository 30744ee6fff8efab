fn main() -> std::process::ExitCode {
    crowdtrack::cli::main_with(std::env::args_os())
}
