fn main() {
    std::process::exit(prismflow_cli::run_command(std::env::args_os()));
}
