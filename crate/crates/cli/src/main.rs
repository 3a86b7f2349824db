fn main() -> std::process::ExitCode {
    roleret_cli::main_with(std::env::args())
}
